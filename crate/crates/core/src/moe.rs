//! Mixture-of-experts prediction and the training objective.
//!
//! The objective evaluates, for one set of per-source mini-batches (and an
//! optional unlabeled target batch), the supervised multi-task loss, the
//! leave-one-source-out mixture loss, the entropy of the mixture weights
//! over all sources, and the MMD adversary, together with the analytic
//! gradient of their weighted sum with respect to every parameter.

use serde::{Deserialize, Serialize};

use crate::adversary::{mmd_gradient, mmd_squared, MmdConfig};
use crate::data::Example;
use crate::encoder::EncoderCache;
use crate::error::{Error, Result};
use crate::metric::{
    compute_domain_stats, confidence, normalize_alpha, trace_distance, ConfidenceKind, DistanceTrace, DomainStats,
};
use crate::model::{Model, ModelParams};
use crate::numerics::{axpy, DenseMatrix};
use crate::params::Parameters;

/// Per-unit prediction of a (possibly single-expert) model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureOutput {
    /// Weights over the active sources.
    pub alpha: Vec<f64>,
    pub expert_posteriors: Vec<Vec<f64>>,
    pub combined: Vec<f64>,
}

impl MixtureOutput {
    pub fn predicted(&self) -> usize {
        argmax(&self.combined)
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) },
        )
        .0
}

/// `Σ_i α_i · p_i`
pub fn moe_posterior(alpha: &[f64], experts: &[Vec<f64>]) -> Result<Vec<f64>> {
    if alpha.len() != experts.len() || experts.is_empty() {
        return Err(Error::invalid(format!(
            "{} mixture weights for {} experts",
            alpha.len(),
            experts.len()
        )));
    }
    let classes = experts[0].len();
    if experts.iter().any(|p| p.len() != classes) {
        return Err(Error::invalid("expert posteriors differ in length"));
    }
    let mut out = vec![0.0; classes];
    for (a, p) in alpha.iter().zip(experts) {
        axpy(*a, p, &mut out);
    }
    Ok(out)
}

/// `−Σ α log α`, with `0 log 0 = 0`.
pub fn entropy(alpha: &[f64]) -> f64 {
    -alpha.iter().filter(|&&a| a > 0.0).map(|a| a * a.ln()).sum::<f64>()
}

/// Mean entropy of per-example weight vectors taken over all sources.
pub fn entropy_regularizer(alpha_all: &[Vec<f64>]) -> f64 {
    if alpha_all.is_empty() {
        return 0.0;
    }
    alpha_all.iter().map(|a| entropy(a)).sum::<f64>() / alpha_all.len() as f64
}

/// Coefficients of the joint objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Balance between the mixture loss (λ) and the multi-task loss (1 − λ).
    pub lambda: f64,
    /// Adversary weight; 0 outside the adversarial setting.
    pub gamma: f64,
    /// Entropy regularizer weight.
    pub eta: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::invalid(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if !(self.gamma >= 0.0 && self.eta >= 0.0) {
            return Err(Error::invalid("gamma and eta must be non-negative"));
        }
        Ok(())
    }
}

/// Direct coefficient on each loss component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComponentWeights {
    pub moe: f64,
    pub mtl: f64,
    pub adv: f64,
    pub entropy: f64,
}

impl From<LossWeights> for ComponentWeights {
    fn from(w: LossWeights) -> Self {
        Self {
            moe: w.lambda,
            mtl: 1.0 - w.lambda,
            adv: w.gamma,
            entropy: w.eta,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub moe: f64,
    pub mtl: f64,
    pub adv: f64,
    pub entropy: f64,
    pub total: f64,
}

/// `λ·moe + (1 − λ)·mtl + γ·adv + η·entropy`
pub fn joint_loss(moe: f64, mtl: f64, adv: f64, entropy: f64, weights: &LossWeights) -> Result<LossBreakdown> {
    weights.validate()?;
    Ok(LossBreakdown {
        moe,
        mtl,
        adv,
        entropy,
        total: weights.lambda * moe + (1.0 - weights.lambda) * mtl + weights.gamma * adv + weights.eta * entropy,
    })
}

/// One optimizer step's worth of data: a labeled batch per source, in
/// expert order, and optionally an unlabeled target batch.
#[derive(Debug, Clone)]
pub struct StepBatch<'a> {
    pub sources: Vec<Vec<&'a Example>>,
    pub target: Option<Vec<&'a Example>>,
}

#[derive(Debug, Clone)]
pub struct ObjectiveOptions<'a> {
    pub weights: ComponentWeights,
    pub mmd: &'a MmdConfig,
    /// Treat batch means as constants in the backward pass.
    pub stop_grad_means: bool,
    /// Detached per-source statistics used when a batch misses a class.
    pub fallback_stats: Option<&'a [DomainStats]>,
}

#[derive(Debug, Clone)]
pub struct ObjectiveOutput {
    pub losses: LossBreakdown,
    /// Mixture loss of each meta-target (mean over its units).
    pub moe_terms: Vec<f64>,
    pub grads: Option<ModelParams>,
}

struct EncodedBatch {
    h: DenseMatrix,
    labels: Vec<usize>,
    cache: EncoderCache,
}

/// Where a confidence's reference point came from, for routing its gradient.
#[derive(Clone, Copy)]
enum Center {
    Mean,
    Class(usize),
    Detached,
}

struct BatchCenters {
    mean: Vec<f64>,
    class_means: Option<Vec<Vec<f64>>>,
    class_detached: bool,
    class_counts: Vec<usize>,
}

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

fn logsumexp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Evaluates the joint objective on one step batch, with gradients when
/// `want_grads` is set.
pub fn objective(
    model: &Model,
    batch: &StepBatch<'_>,
    opts: &ObjectiveOptions<'_>,
    want_grads: bool,
) -> Result<ObjectiveOutput> {
    let w = opts.weights;
    if [w.moe, w.mtl, w.adv, w.entropy]
        .iter()
        .any(|v| !(v.is_finite() && *v >= 0.0))
    {
        return Err(Error::invalid("loss weights must be finite and non-negative"));
    }
    let params = &model.params;
    let k = batch.sources.len();
    if k != params.experts.len() {
        return Err(Error::invalid(format!(
            "{k} source batches for {} experts",
            params.experts.len()
        )));
    }
    let classes = model.config.num_classes;
    let mixture = model.is_mixture() && k >= 2;

    // Forward through the shared encoder.
    let mut encoded = Vec::with_capacity(k);
    for (t, examples) in batch.sources.iter().enumerate() {
        let (h, cache) = params.encoder.forward(examples)?;
        let mut labels = Vec::with_capacity(h.rows());
        for ex in examples {
            labels.extend(
                ex.unit_labels()
                    .ok_or_else(|| Error::contract(format!("source batch {t} is unlabeled")))?,
            );
        }
        if labels.is_empty() {
            return Err(Error::invalid(format!("source batch {t} has no units")));
        }
        if labels.iter().any(|&y| y >= classes) {
            return Err(Error::invalid(format!("source batch {t} has an out-of-range label")));
        }
        encoded.push(EncodedBatch { h, labels, cache });
    }

    let (w_moe, w_mtl, w_adv, w_ent) = if mixture {
        (w.moe, w.mtl, w.adv, w.entropy)
    } else {
        (0.0, w.mtl, w.adv, 0.0)
    };

    let mut grads = want_grads.then(|| params.zeros_like());
    let mut dh: Vec<DenseMatrix> = encoded
        .iter()
        .map(|e| DenseMatrix::zeros(e.h.rows(), e.h.cols()))
        .collect();

    // Log-posteriors: logp[t][l] is n_t × C, computed for every expert in a
    // mixture and only for the batch's own expert otherwise.
    let logp: Vec<Vec<Option<DenseMatrix>>> = encoded
        .iter()
        .enumerate()
        .map(|(t, e)| {
            params
                .experts
                .iter()
                .enumerate()
                .map(|(l, expert)| -> Result<Option<DenseMatrix>> {
                    if !mixture && l != t {
                        return Ok(None);
                    }
                    let mut out = DenseMatrix::zeros(e.h.rows(), classes);
                    for (j, row) in e.h.iter_rows().enumerate() {
                        out.row_mut(j).copy_from_slice(&log_softmax(&expert.logits(row)?));
                    }
                    Ok(Some(out))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let lp = |t: usize, l: usize| logp[t][l].as_ref().expect("computed above");

    let centers: Vec<BatchCenters> = if mixture {
        encoded
            .iter()
            .enumerate()
            .map(|(l, e)| batch_centers(model, l, e, opts))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let mut d_mean: Vec<Vec<f64>> = vec![vec![0.0; model.config.hidden]; centers.len()];
    let mut d_class: Vec<Vec<Vec<f64>>> = vec![vec![vec![0.0; model.config.hidden]; classes]; centers.len()];

    let mut mtl_sum = 0.0;
    let mut moe_terms = vec![0.0; k];
    let mut ent_sum = 0.0;

    for t in 0..k {
        let e = &encoded[t];
        let n = e.h.rows() as f64;
        let unit_scale = 1.0 / (k as f64 * n);
        let mut mtl_t = 0.0;
        let mut moe_t = 0.0;
        let mut ent_t = 0.0;
        for (j, h) in e.h.iter_rows().enumerate() {
            let y = e.labels[j];
            // dz[l]: gradient on expert l's logits for this unit.
            let mut dz: Vec<Option<Vec<f64>>> = vec![None; params.experts.len()];
            let mut add_dz = |l: usize, scale: f64, lp: &[f64]| {
                let slot = dz[l].get_or_insert_with(|| vec![0.0; classes]);
                for (c, v) in slot.iter_mut().enumerate() {
                    let onehot = if c == y { 1.0 } else { 0.0 };
                    *v += scale * (lp[c].exp() - onehot);
                }
            };

            // Multi-task cross-entropy on the unit's own expert.
            let own = lp(t, t).row(j);
            mtl_t += -own[y];
            if w_mtl != 0.0 {
                add_dz(t, w_mtl * unit_scale, own);
            }

            if mixture {
                let mut traces: Vec<ConfidenceTrace> = Vec::with_capacity(k);
                for l in 0..k {
                    traces.push(confidence_trace(model, l, h, &centers[l])?);
                }
                let e_all: Vec<f64> = traces.iter().map(|c| c.value).collect();
                let mut ge = vec![0.0; k];

                // Leave-one-out mixture over the meta-sources l ≠ t.
                let active: Vec<usize> = (0..k).filter(|&l| l != t).collect();
                let e_active: Vec<f64> = active.iter().map(|&l| e_all[l]).collect();
                let lse_e = logsumexp(&e_active);
                let terms: Vec<f64> = active.iter().map(|&l| (e_all[l] - lse_e) + lp(t, l)[(j, y)]).collect();
                let log_q = logsumexp(&terms);
                moe_t += -log_q;
                if w_moe != 0.0 {
                    let s = w_moe * unit_scale;
                    for (i, &l) in active.iter().enumerate() {
                        let alpha = (e_all[l] - lse_e).exp();
                        let resp = (terms[i] - log_q).exp();
                        ge[l] += s * (alpha - resp);
                        add_dz(l, s * resp, lp(t, l).row(j));
                    }
                }

                // Entropy of the weights over all k sources.
                let alpha_all = normalize_alpha(&e_all)?;
                let ent = entropy(&alpha_all);
                ent_t += ent;
                if w_ent != 0.0 {
                    let s = w_ent * unit_scale;
                    for l in 0..k {
                        let a = alpha_all[l];
                        if a > 0.0 {
                            ge[l] += s * (-a * (a.ln() + ent));
                        }
                    }
                }

                if let Some(g) = grads.as_mut() {
                    for l in 0..k {
                        if ge[l] != 0.0 {
                            backprop_confidence(
                                model,
                                l,
                                &traces[l],
                                ge[l],
                                dh[t].row_mut(j),
                                &mut g.metrics[model.metric_index(l)],
                                &mut d_mean[l],
                                &mut d_class[l],
                            );
                        }
                    }
                }
            }

            if let Some(g) = grads.as_mut() {
                for (l, dz) in dz.into_iter().enumerate() {
                    if let Some(dz) = dz {
                        let dh_row = params.experts[l].backward_into(h, &dz, &mut g.experts[l]);
                        axpy(1.0, &dh_row, dh[t].row_mut(j));
                    }
                }
            }
        }
        mtl_sum += mtl_t / n;
        moe_terms[t] = moe_t / n;
        ent_sum += ent_t / n;
    }

    // Route center gradients back to the batch rows that formed them.
    if grads.is_some() && mixture && !opts.stop_grad_means {
        for l in 0..k {
            let e = &encoded[l];
            let c = &centers[l];
            let n = e.h.rows() as f64;
            for j in 0..e.h.rows() {
                let row = dh[l].row_mut(j);
                axpy(1.0 / n, &d_mean[l], row);
                if c.class_means.is_some() && !c.class_detached {
                    let y = e.labels[j];
                    axpy(1.0 / c.class_counts[y] as f64, &d_class[l][y], row);
                }
            }
        }
    }

    // Adversary between pooled source encodings and target encodings.
    let mut adv = 0.0;
    let mut target_pass = None;
    if let Some(target) = &batch.target {
        let (ht, cache_t) = params.encoder.forward(target)?;
        let parts: Vec<&DenseMatrix> = encoded.iter().map(|e| &e.h).collect();
        let pooled = DenseMatrix::vstack(&parts)?;
        if grads.is_some() && w_adv != 0.0 {
            let (value, ds, dt) = mmd_gradient(&pooled, &ht, opts.mmd)?;
            adv = value;
            let mut offset = 0;
            for d in dh.iter_mut() {
                for j in 0..d.rows() {
                    axpy(w_adv, ds.row(offset + j), d.row_mut(j));
                }
                offset += d.rows();
            }
            let mut dt = dt;
            dt.scale(w_adv);
            target_pass = Some((cache_t, dt));
        } else {
            adv = mmd_squared(&pooled, &ht, opts.mmd)?;
        }
    }

    if let Some(g) = grads.as_mut() {
        for (e, d) in encoded.iter().zip(&dh) {
            let ge = params.encoder.backward(&e.cache, d)?;
            g.encoder.add_scaled(1.0, &ge);
        }
        if let Some((cache_t, dt)) = target_pass {
            let ge = params.encoder.backward(&cache_t, &dt)?;
            g.encoder.add_scaled(1.0, &ge);
        }
    }

    let kf = k as f64;
    let moe = if mixture {
        moe_terms.iter().sum::<f64>() / kf
    } else {
        0.0
    };
    let entropy_mean = if mixture { ent_sum / kf } else { 0.0 };
    let mtl = mtl_sum / kf;
    let losses = LossBreakdown {
        moe,
        mtl,
        adv,
        entropy: entropy_mean,
        total: w_moe * moe + w_mtl * mtl + w_adv * adv + w_ent * entropy_mean,
    };
    if !losses.total.is_finite() {
        return Err(Error::Numerical("objective is not finite".into()));
    }
    Ok(ObjectiveOutput {
        losses,
        moe_terms: if mixture { moe_terms } else { Vec::new() },
        grads,
    })
}

fn batch_centers(model: &Model, l: usize, e: &EncodedBatch, opts: &ObjectiveOptions<'_>) -> Result<BatchCenters> {
    let classes = model.config.num_classes;
    let stats = compute_domain_stats(&e.h, Some((&e.labels, classes)))?;
    let mut class_counts = vec![0usize; classes];
    for &y in &e.labels {
        class_counts[y] += 1;
    }
    let needs_classes = model.config.confidence == ConfidenceKind::MaxClusterDifference;
    let (class_means, class_detached) = match (stats.class_means, needs_classes) {
        (Some(cm), _) => (Some(cm), false),
        (None, false) => (None, false),
        (None, true) => {
            let fallback = opts
                .fallback_stats
                .and_then(|s| s.get(l))
                .and_then(|s| s.class_means.clone())
                .ok_or_else(|| {
                    Error::contract(format!(
                        "batch of source {l} misses a class and no fallback statistics were given"
                    ))
                })?;
            (Some(fallback), true)
        }
    };
    Ok(BatchCenters {
        mean: stats.mean,
        class_means,
        class_detached,
        class_counts,
    })
}

struct ConfidenceTrace {
    value: f64,
    /// (distance trace, center it was measured against, ∂e/∂d)
    parts: Vec<(DistanceTrace, Center, f64)>,
}

fn confidence_trace(model: &Model, l: usize, h: &[f64], c: &BatchCenters) -> Result<ConfidenceTrace> {
    let u = model.metric(l);
    match model.config.confidence {
        ConfidenceKind::MaxClusterDifference => {
            let means = c.class_means.as_ref().expect("checked in batch_centers");
            let neg = trace_distance(h, &means[0], u)?;
            let pos = trace_distance(h, &means[1], u)?;
            let diff = pos.d - neg.d;
            // subgradient 0 at a tie
            let sign = if diff > 0.0 {
                1.0
            } else if diff < 0.0 {
                -1.0
            } else {
                0.0
            };
            let center = |class| {
                if c.class_detached {
                    Center::Detached
                } else {
                    Center::Class(class)
                }
            };
            Ok(ConfidenceTrace {
                value: diff.abs(),
                parts: vec![(pos, center(1), sign), (neg, center(0), -sign)],
            })
        }
        ConfidenceKind::NegativeDistance => {
            let t = trace_distance(h, &c.mean, u)?;
            Ok(ConfidenceTrace {
                value: -t.d,
                parts: vec![(t, Center::Mean, -1.0)],
            })
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn backprop_confidence(
    model: &Model,
    l: usize,
    trace: &ConfidenceTrace,
    grad_e: f64,
    dh_row: &mut [f64],
    grad_u: &mut DenseMatrix,
    d_mean: &mut [f64],
    d_class: &mut [Vec<f64>],
) {
    let u = model.metric(l);
    for (dist, center, de_dd) in &trace.parts {
        let gd = grad_e * de_dd;
        if gd == 0.0 {
            continue;
        }
        let gp = dist.grad_point(u);
        axpy(gd, &gp, dh_row);
        dist.accumulate_grad_u(gd, grad_u);
        match center {
            Center::Mean => axpy(-gd, &gp, d_mean),
            Center::Class(c) => axpy(-gd, &gp, &mut d_class[*c]),
            Center::Detached => {}
        }
    }
}

fn loss_only_options(mmd: &MmdConfig) -> ObjectiveOptions<'_> {
    ObjectiveOptions {
        weights: ComponentWeights {
            moe: 1.0,
            mtl: 1.0,
            adv: 0.0,
            entropy: 0.0,
        },
        mmd,
        stop_grad_means: false,
        fallback_stats: None,
    }
}

/// Mean leave-one-source-out mixture loss over labeled per-source batches.
pub fn moe_loss(model: &Model, sources: &[Vec<&Example>]) -> Result<f64> {
    if sources.len() < 2 || !model.is_mixture() {
        return Err(Error::contract(
            "the mixture loss needs at least two sources and a metric",
        ));
    }
    let mmd = MmdConfig::default();
    let batch = StepBatch {
        sources: sources.to_vec(),
        target: None,
    };
    Ok(objective(model, &batch, &loss_only_options(&mmd), false)?.losses.moe)
}

/// Mean cross-entropy of each source batch under its own expert.
pub fn mtl_loss(model: &Model, sources: &[Vec<&Example>]) -> Result<f64> {
    let mmd = MmdConfig::default();
    let batch = StepBatch {
        sources: sources.to_vec(),
        target: None,
    };
    Ok(objective(model, &batch, &loss_only_options(&mmd), false)?.losses.mtl)
}

/// Mixture prediction for each unit of `example` over the `active` experts,
/// measuring confidences against `stats` (indexed like the experts).
pub fn predict_over(
    model: &Model,
    example: &Example,
    active: &[usize],
    stats: &[DomainStats],
) -> Result<Vec<MixtureOutput>> {
    if active.is_empty() {
        return Err(Error::invalid("no active experts"));
    }
    if active.iter().any(|&l| l >= model.num_experts()) {
        return Err(Error::invalid("active expert index out of range"));
    }
    let mixture = model.is_mixture() && active.len() > 1;
    if mixture && active.iter().any(|&l| l >= stats.len()) {
        return Err(Error::contract("missing domain statistics for an active source"));
    }
    let h = model.params.encoder.encode(example)?;
    let mut out = Vec::with_capacity(h.rows());
    for row in h.iter_rows() {
        let posteriors = active
            .iter()
            .map(|&l| crate::encoder::expert_posterior(row, &model.params.experts[l]))
            .collect::<Result<Vec<_>>>()?;
        let alpha = if mixture {
            let conf = active
                .iter()
                .map(|&l| confidence(model.config.confidence, row, &stats[l], model.metric(l)))
                .collect::<Result<Vec<_>>>()?;
            normalize_alpha(&conf)?
        } else {
            vec![1.0 / active.len() as f64; active.len()]
        };
        let combined = moe_posterior(&alpha, &posteriors)?;
        out.push(MixtureOutput {
            alpha,
            expert_posteriors: posteriors,
            combined,
        });
    }
    Ok(out)
}

/// Prediction with weights normalized over all experts, using the model's
/// full-domain statistics.
pub fn predict(model: &Model, example: &Example) -> Result<Vec<MixtureOutput>> {
    if model.is_mixture() && model.source_stats.len() != model.num_experts() {
        return Err(Error::contract(
            "model has no full-domain statistics; train or refresh first",
        ));
    }
    let active: Vec<usize> = (0..model.num_experts()).collect();
    predict_over(model, example, &active, &model.source_stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(lambda: f64, gamma: f64, eta: f64) -> LossWeights {
        LossWeights { lambda, gamma, eta }
    }

    #[test]
    fn moe_posterior_examples() {
        let p1 = vec![0.9, 0.1];
        let p2 = vec![0.3, 0.7];
        assert_eq!(moe_posterior(&[1.0, 0.0], &[p1.clone(), p2]).unwrap(), p1);
        let same = vec![0.25, 0.75];
        let mixed = moe_posterior(&[0.2, 0.8], &[same.clone(), same.clone()]).unwrap();
        for (a, b) in mixed.iter().zip(&same) {
            assert!((a - b).abs() < 1e-15);
        }
        let m = moe_posterior(&[0.5, 0.5], &[vec![0.8, 0.2], vec![0.4, 0.6]]).unwrap();
        assert!((m[0] - 0.6).abs() < 1e-15 && (m[1] - 0.4).abs() < 1e-15);
        assert!(moe_posterior(&[1.0], &[vec![0.5, 0.5], vec![0.5, 0.5]]).is_err());
        assert!(moe_posterior(&[0.5, 0.5], &[vec![0.5, 0.5], vec![1.0]]).is_err());
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy_regularizer(&[vec![0.0, 1.0, 0.0]]), 0.0);
        let uniform = entropy_regularizer(&[vec![0.25; 4]]);
        assert!((uniform - 4f64.ln()).abs() < 1e-15);
        assert!((uniform - 1.3863).abs() < 1e-4);
        let h = entropy_regularizer(&[vec![0.5, 0.25, 0.25]]);
        assert!((h - 1.0397).abs() < 1e-4);
        assert!((h - 1.5 * 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn joint_loss_examples() {
        assert_eq!(joint_loss(2.0, 4.0, 0.6, 1.0, &w(1.0, 0.0, 0.0)).unwrap().total, 2.0);
        assert_eq!(joint_loss(2.0, 4.0, 0.6, 1.0, &w(0.0, 0.0, 0.0)).unwrap().total, 4.0);
        let j = joint_loss(2.0, 4.0, 0.6, 1.0, &w(0.5, 1.0, 0.1)).unwrap();
        assert!((j.total - 3.7).abs() < 1e-12);
        assert!(joint_loss(1.0, 1.0, 0.0, 0.0, &w(1.5, 0.0, 0.0)).is_err());
        assert!(joint_loss(1.0, 1.0, 0.0, 0.0, &w(0.5, -1.0, 0.0)).is_err());
    }
}
