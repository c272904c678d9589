//! Training loop, early stopping, evaluation, baselines and
//! hyper-parameter selection.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversary::{mmd_squared, MmdConfig};
use crate::data::{check_compatible, split, DomainDataset, Example, Task, Vocabulary};
use crate::error::{Error, Result};
use crate::metric::{ConfidenceKind, DomainStats};
use crate::model::{Model, ModelConfig, ModelParams};
use crate::moe::{
    argmax, objective, predict_over, ComponentWeights, LossBreakdown, LossWeights, ObjectiveOptions, StepBatch,
};
use crate::numerics::{permutation, seeded_rng};
use crate::optim::{adam_step, AdamState};

const STREAM_INIT: u64 = 0;
const STREAM_TARGET: u64 = 1;
const STREAM_SOURCE: u64 = 16;

/// Which model family to train.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Mixture of per-source experts weighted by the learned metric.
    Moe,
    /// One model per source; the best one is kept.
    BestSs,
    /// One model on the union of all sources.
    UniMs,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Moe => "moe",
            Mode::BestSs => "best-ss",
            Mode::UniMs => "uni-ms",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "moe" => Ok(Mode::Moe),
            "best-ss" => Ok(Mode::BestSs),
            "uni-ms" => Ok(Mode::UniMs),
            other => Err(Error::invalid(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: Mode,
    /// Adds the MMD term with weight `gamma`; without it the term is logged
    /// but weighted 0.
    pub adversarial: bool,
    pub batch_size: usize,
    pub lambda: f64,
    pub gamma: f64,
    pub eta: f64,
    pub hidden: usize,
    /// Metric rank; `min(hidden, 64)` when unset.
    pub rank: Option<usize>,
    /// 1e-4 for sparse vector data and 1e-3 otherwise when unset.
    pub learning_rate: Option<f64>,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Share of each source held out for early stopping when no labeled
    /// validation set is given.
    pub valid_fraction: f64,
    pub confidence: Option<ConfidenceKind>,
    pub classifier_bias: bool,
    pub shared_metric: bool,
    pub stop_grad_means: bool,
    pub emb_dim: usize,
    pub window_radius: usize,
    pub mmd: MmdConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Moe,
            adversarial: false,
            batch_size: 32,
            lambda: 0.5,
            gamma: 1.0,
            eta: 0.01,
            hidden: 64,
            rank: None,
            learning_rate: None,
            weight_decay: 1e-4,
            max_epochs: 100,
            patience: 10,
            seed: 0,
            valid_fraction: 0.2,
            confidence: None,
            classifier_bias: false,
            shared_metric: false,
            stop_grad_means: false,
            emb_dim: 32,
            window_radius: 2,
            mmd: MmdConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if let Some(lr) = self.learning_rate {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("learning_rate {lr} must be positive"));
            }
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1".into());
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay {} must be non-negative", self.weight_decay));
        }
        if !(self.valid_fraction > 0.0 && self.valid_fraction < 1.0) {
            return bad(format!("valid_fraction {} not in (0, 1)", self.valid_fraction));
        }
        if self.hidden == 0 || self.rank == Some(0) {
            return bad("hidden and rank must be positive".into());
        }
        self.loss_weights().validate().map_err(|e| Error::Config(e.to_string()))
    }

    /// Objective weights with the adversary gated by mode. Baselines train
    /// their experts on the multi-task loss only.
    pub fn loss_weights(&self) -> LossWeights {
        let gamma = if self.adversarial { self.gamma } else { 0.0 };
        match self.mode {
            Mode::Moe => LossWeights {
                lambda: self.lambda,
                gamma,
                eta: self.eta,
            },
            Mode::BestSs | Mode::UniMs => LossWeights {
                lambda: 0.0,
                gamma,
                eta: 0.0,
            },
        }
    }

    /// Explicit learning rate, or the default for this kind of data.
    pub fn resolve_learning_rate(&self, sources: &[&DomainDataset]) -> f64 {
        self.learning_rate
            .unwrap_or_else(|| if is_sparse(sources) { 1e-4 } else { 1e-3 })
    }

    /// Architecture for `sources` under this configuration.
    pub fn model_config(&self, sources: &[&DomainDataset]) -> Result<ModelConfig> {
        let first = sources.first().ok_or_else(|| Error::invalid("no source domains"))?;
        let mut mc = ModelConfig::for_data(first.task, first.input_dim, first.num_classes(), self.hidden);
        if let Some(r) = self.rank {
            mc.rank = r;
        }
        if let Some(c) = self.confidence {
            mc.confidence = c;
        }
        mc.classifier_bias = self.classifier_bias;
        mc.shared_metric = self.shared_metric;
        mc.emb_dim = self.emb_dim;
        mc.window_radius = self.window_radius;
        mc.validate()?;
        Ok(mc)
    }
}

/// Vector data with fewer than half of its feature entries nonzero.
fn is_sparse(sources: &[&DomainDataset]) -> bool {
    let (mut nonzero, mut total) = (0usize, 0usize);
    for ds in sources {
        for ex in &ds.examples {
            if let Example::Vector { features, .. } = ex {
                nonzero += features.iter().filter(|v| **v != 0.0).count();
                total += features.len();
            }
        }
    }
    total > 0 && (nonzero as f64) < 0.5 * total as f64
}

/// One leave-one-source-out arrangement.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetaPair {
    pub meta_target: usize,
    pub meta_sources: Vec<usize>,
}

pub fn build_meta_pairs(k: usize) -> Result<Vec<MetaPair>> {
    if k < 2 {
        return Err(Error::invalid(format!("meta pairs need at least two sources, got {k}")));
    }
    Ok((0..k)
        .map(|t| MetaPair {
            meta_target: t,
            meta_sources: (0..k).filter(|&l| l != t).collect(),
        })
        .collect())
}

/// Endless shuffled index stream over one dataset; reshuffles on wrap.
#[derive(Debug, Clone)]
pub struct BatchStream {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl BatchStream {
    pub fn new(len: usize, seed: u64, stream: u64) -> Result<Self> {
        if len == 0 {
            return Err(Error::invalid("cannot batch an empty dataset"));
        }
        let mut rng = seeded_rng(seed, stream);
        let order = permutation(len, &mut rng);
        Ok(Self { order, cursor: 0, rng })
    }

    /// Next `min(m, len)` indices, distinct within the batch.
    pub fn next_batch(&mut self, m: usize) -> Vec<usize> {
        let n = self.order.len();
        let take = m.min(n);
        if self.cursor + take > n {
            self.order = permutation(n, &mut self.rng);
            self.cursor = 0;
        }
        let out = self.order[self.cursor..self.cursor + take].to_vec();
        self.cursor += take;
        out
    }
}

/// Optimizer state and data streams for one model.
#[derive(Debug, Clone)]
pub struct TrainSession {
    pub model: Model,
    sources: Vec<DomainDataset>,
    target: Option<DomainDataset>,
    streams: Vec<BatchStream>,
    target_stream: Option<BatchStream>,
    adam: AdamState,
    weights: ComponentWeights,
    mmd: MmdConfig,
    learning_rate: f64,
    weight_decay: f64,
    batch_size: usize,
    stop_grad_means: bool,
}

impl TrainSession {
    /// `sources` are the training sets, one per expert. A target set makes
    /// every step draw a target batch and compute the adversary term.
    pub fn new(
        model: Model,
        sources: Vec<DomainDataset>,
        target: Option<DomainDataset>,
        cfg: &TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if sources.len() != model.num_experts() {
            return Err(Error::invalid(format!(
                "{} training sets for {} experts",
                sources.len(),
                model.num_experts()
            )));
        }
        let weights = cfg.loss_weights();
        if weights.gamma > 0.0 && target.is_none() {
            return Err(Error::Config("adversarial training needs target data".into()));
        }
        let mut all: Vec<&DomainDataset> = sources.iter().collect();
        all.extend(target.as_ref());
        check_compatible(&all)?;
        if let Some(ds) = sources.iter().find(|d| !d.is_labeled()) {
            return Err(Error::invalid(format!("source {} has unlabeled examples", ds.name)));
        }
        let streams = sources
            .iter()
            .enumerate()
            .map(|(i, d)| BatchStream::new(d.len(), cfg.seed, STREAM_SOURCE + i as u64))
            .collect::<Result<_>>()?;
        let target_stream = target
            .as_ref()
            .map(|t| BatchStream::new(t.len(), cfg.seed, STREAM_TARGET))
            .transpose()?;
        let refs: Vec<&DomainDataset> = sources.iter().collect();
        let learning_rate = cfg.resolve_learning_rate(&refs);
        Ok(Self {
            adam: AdamState::new(&model.params),
            model,
            sources,
            target,
            streams,
            target_stream,
            weights: weights.into(),
            mmd: cfg.mmd.clone(),
            learning_rate,
            weight_decay: cfg.weight_decay,
            batch_size: cfg.batch_size,
            stop_grad_means: cfg.stop_grad_means,
        })
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn sources(&self) -> &[DomainDataset] {
        &self.sources
    }

    /// `⌈min_i |S_i| / m⌉`
    pub fn steps_per_epoch(&self) -> usize {
        let min = self.sources.iter().map(|d| d.len()).min().unwrap_or(0);
        min.div_ceil(self.batch_size)
    }

    fn needs_fallback(&self) -> bool {
        self.model.is_mixture() && self.model.config.confidence == ConfidenceKind::MaxClusterDifference
    }

    /// One optimizer step on freshly drawn batches.
    pub fn step(&mut self, fallback: Option<&[DomainStats]>) -> Result<LossBreakdown> {
        let m = self.batch_size;
        let batch = StepBatch {
            sources: self
                .streams
                .iter_mut()
                .zip(&self.sources)
                .map(|(s, d)| s.next_batch(m).into_iter().map(|i| &d.examples[i]).collect())
                .collect(),
            target: self
                .target_stream
                .as_mut()
                .zip(self.target.as_ref())
                .map(|(s, d)| s.next_batch(m).into_iter().map(|i| &d.examples[i]).collect()),
        };
        let opts = ObjectiveOptions {
            weights: self.weights,
            mmd: &self.mmd,
            stop_grad_means: self.stop_grad_means,
            fallback_stats: fallback,
        };
        let out = objective(&self.model, &batch, &opts, true)?;
        let grads = out.grads.expect("gradients requested");
        if !out.losses.total.is_finite() || !all_finite(&grads) {
            return Err(Error::Numerical(format!(
                "non-finite loss or gradient (total loss {})",
                out.losses.total
            )));
        }
        adam_step(
            &mut self.model.params,
            &grads,
            &mut self.adam,
            self.learning_rate,
            self.weight_decay,
        )?;
        Ok(out.losses)
    }

    /// One epoch; returns the mean of the per-step losses.
    pub fn train_epoch(&mut self) -> Result<LossBreakdown> {
        let fallback = if self.needs_fallback() {
            Some(
                self.sources
                    .iter()
                    .map(|d| self.model.domain_stats(d))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        let steps = self.steps_per_epoch();
        let mut sum = LossBreakdown::default();
        for _ in 0..steps {
            let l = self.step(fallback.as_deref())?;
            sum.moe += l.moe;
            sum.mtl += l.mtl;
            sum.adv += l.adv;
            sum.entropy += l.entropy;
            sum.total += l.total;
        }
        let n = steps as f64;
        Ok(LossBreakdown {
            moe: sum.moe / n,
            mtl: sum.mtl / n,
            adv: sum.adv / n,
            entropy: sum.entropy / n,
            total: sum.total / n,
        })
    }
}

fn all_finite(p: &ModelParams) -> bool {
    use crate::params::Parameters;
    p.tensors().iter().all(|t| t.as_slice().iter().all(|v| v.is_finite()))
}

/// Early-stopping signal.
#[derive(Debug, Clone)]
pub enum Validation {
    /// Held-out part of each training source, in expert order. Mixtures
    /// score each part with the other experts only.
    HeldOut(Vec<DomainDataset>),
    /// A labeled set scored with every expert.
    Labeled(DomainDataset),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub losses: LossBreakdown,
    pub valid_accuracy: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochLog>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_valid: f64,
}

fn score(model: &Model, ds: &DomainDataset, active: &[usize], stats: &[DomainStats]) -> Result<(usize, usize)> {
    let (mut correct, mut total) = (0, 0);
    for ex in &ds.examples {
        let labels = ex
            .unit_labels()
            .ok_or_else(|| Error::invalid(format!("{} has unlabeled examples", ds.name)))?;
        let outs = predict_over(model, ex, active, stats)?;
        for (o, y) in outs.iter().zip(labels) {
            correct += usize::from(o.predicted() == y);
            total += 1;
        }
    }
    Ok((correct, total))
}

fn ratio((correct, total): (usize, usize)) -> Result<f64> {
    if total == 0 {
        return Err(Error::invalid("accuracy of an empty dataset"));
    }
    Ok(correct as f64 / total as f64)
}

/// Validation accuracy of `model`, with statistics taken from `train`.
pub fn validation_accuracy(model: &Model, train: &[DomainDataset], validation: &Validation) -> Result<f64> {
    let stats = if model.is_mixture() {
        train
            .iter()
            .map(|d| model.domain_stats(d))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    let k = model.num_experts();
    match validation {
        Validation::Labeled(ds) => ratio(score(model, ds, &(0..k).collect::<Vec<_>>(), &stats)?),
        Validation::HeldOut(parts) => {
            if parts.len() != k {
                return Err(Error::invalid("one held-out set per expert expected"));
            }
            if k == 1 {
                return ratio(score(model, &parts[0], &[0], &stats)?);
            }
            let mut sum = 0.0;
            for pair in build_meta_pairs(k)? {
                sum += ratio(score(model, &parts[pair.meta_target], &pair.meta_sources, &stats)?)?;
            }
            Ok(sum / k as f64)
        }
    }
}

/// Trains until `patience` epochs pass without a strict validation
/// improvement, restores the best parameters, then recomputes full-domain
/// statistics on `full` (one dataset per expert).
pub fn fit(
    session: TrainSession,
    validation: &Validation,
    full: &[&DomainDataset],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let mut session = session;
    let mut history = Vec::new();
    let mut best: Option<(ModelParams, usize, f64)> = None;
    let mut stale = 0;
    for epoch in 1..=cfg.max_epochs {
        let losses = session.train_epoch()?;
        let valid = validation_accuracy(&session.model, session.sources(), validation)?;
        log::debug!("epoch {epoch}: total {:.6} valid {:.4}", losses.total, valid);
        history.push(EpochLog {
            epoch,
            losses,
            valid_accuracy: valid,
            learning_rate: session.learning_rate(),
        });
        if best.as_ref().is_none_or(|b| valid > b.2) {
            best = Some((session.model.params.clone(), epoch, valid));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    let (params, best_epoch, best_valid) = best.expect("at least one epoch");
    let mut model = session.model;
    model.params = params;
    if model.is_mixture() {
        model.refresh_source_stats(full)?;
    } else {
        model.source_stats = full.iter().map(|d| model.domain_stats(d)).collect::<Result<_>>()?;
    }
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        best_valid,
    })
}

/// Data for a training run. Sources must be labeled; the target is used
/// unlabeled for the adversary.
#[derive(Debug, Clone, Copy)]
pub struct TrainInputs<'a> {
    pub sources: &'a [DomainDataset],
    pub target: Option<&'a DomainDataset>,
    /// Labeled early-stopping set; otherwise each source is split.
    pub validation: Option<&'a DomainDataset>,
    pub vocab: Option<&'a Vocabulary>,
}

impl<'a> TrainInputs<'a> {
    pub fn new(sources: &'a [DomainDataset]) -> Self {
        Self {
            sources,
            target: None,
            validation: None,
            vocab: None,
        }
    }

    pub fn with_target(self, target: &'a DomainDataset) -> Self {
        Self {
            target: Some(target),
            ..self
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub source: String,
    pub best_valid: f64,
    pub target_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub model: Model,
    pub history: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_valid: f64,
    /// best-SS: index of the kept source and every candidate's scores.
    pub selected_source: Option<usize>,
    pub candidates: Vec<CandidateScore>,
}

fn train_single_model(
    names: Vec<String>,
    train: Vec<DomainDataset>,
    validation: Validation,
    full: &[&DomainDataset],
    inputs: &TrainInputs<'_>,
    with_metric: bool,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let model = fresh_model(names, full, inputs.vocab, with_metric, cfg)?;
    let target = inputs.target.map(|t| t.unlabeled());
    let session = TrainSession::new(model, train, target, cfg)?;
    fit(session, &validation, full, cfg)
}

fn fresh_model(
    names: Vec<String>,
    full: &[&DomainDataset],
    vocab: Option<&Vocabulary>,
    with_metric: bool,
    cfg: &TrainConfig,
) -> Result<Model> {
    let mc = cfg.model_config(full)?;
    let label_set = full[0].label_set.clone();
    let mut rng = seeded_rng(cfg.seed, STREAM_INIT);
    Model::new(mc, names, label_set, vocab.cloned(), with_metric, &mut rng)
}

/// The untrained model `train` starts from for these inputs.
pub fn initial_model(inputs: &TrainInputs<'_>, cfg: &TrainConfig) -> Result<Model> {
    check_inputs(inputs, cfg)?;
    let full: Vec<&DomainDataset> = inputs.sources.iter().collect();
    match cfg.mode {
        Mode::Moe => {
            let names = full.iter().map(|d| d.name.clone()).collect();
            fresh_model(names, &full, inputs.vocab, true, cfg)
        }
        Mode::UniMs => fresh_model(vec!["uni-ms".into()], &full, inputs.vocab, false, cfg),
        Mode::BestSs => Err(Error::invalid("best-ss trains several models")),
    }
}

/// Training parts and the early-stopping signal for each source.
fn prepare(
    sources: &[&DomainDataset],
    inputs: &TrainInputs<'_>,
    cfg: &TrainConfig,
) -> Result<(Vec<DomainDataset>, Validation)> {
    match inputs.validation {
        Some(v) => {
            check_compatible(&[sources[0], v])?;
            Ok((
                sources.iter().map(|d| (*d).clone()).collect(),
                Validation::Labeled(v.clone()),
            ))
        }
        None => {
            let mut train = Vec::new();
            let mut held = Vec::new();
            for (i, d) in sources.iter().enumerate() {
                let (a, b) = split(d, 1.0 - cfg.valid_fraction, cfg.seed.wrapping_add(i as u64))?;
                train.push(a);
                held.push(b);
            }
            Ok((train, Validation::HeldOut(held)))
        }
    }
}

fn check_inputs(inputs: &TrainInputs<'_>, cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    if inputs.sources.is_empty() {
        return Err(Error::invalid("no source domains"));
    }
    let mut all: Vec<&DomainDataset> = inputs.sources.iter().collect();
    all.extend(inputs.target);
    check_compatible(&all)?;
    if cfg.adversarial && inputs.target.is_none() {
        return Err(Error::Config("adversarial training needs target data".into()));
    }
    Ok(())
}

/// Trains the model family selected by `cfg.mode`.
pub fn train(inputs: &TrainInputs<'_>, cfg: &TrainConfig) -> Result<TrainReport> {
    check_inputs(inputs, cfg)?;
    match cfg.mode {
        Mode::Moe => {
            if inputs.sources.len() < 2 {
                return Err(Error::invalid("the mixture needs at least two sources"));
            }
            let full: Vec<&DomainDataset> = inputs.sources.iter().collect();
            let (train, validation) = prepare(&full, inputs, cfg)?;
            let names = inputs.sources.iter().map(|d| d.name.clone()).collect();
            let out = train_single_model(names, train, validation, &full, inputs, true, cfg)?;
            Ok(report(out, None, Vec::new()))
        }
        Mode::UniMs | Mode::BestSs => train_baseline(inputs, cfg),
    }
}

fn report(out: TrainOutcome, selected_source: Option<usize>, candidates: Vec<CandidateScore>) -> TrainReport {
    TrainReport {
        model: out.model,
        history: out.history,
        best_epoch: out.best_epoch,
        best_valid: out.best_valid,
        selected_source,
        candidates,
    }
}

/// Single-classifier baselines. uni-MS trains one expert on the union of
/// the sources. best-SS trains one model per source and keeps the one with
/// the highest target accuracy when the target is labeled, otherwise the
/// one with the highest validation accuracy; ties go to the lower index.
pub fn train_baseline(inputs: &TrainInputs<'_>, cfg: &TrainConfig) -> Result<TrainReport> {
    check_inputs(inputs, cfg)?;
    let full: Vec<&DomainDataset> = inputs.sources.iter().collect();
    match cfg.mode {
        Mode::UniMs => {
            let (train, validation) = prepare(&full, inputs, cfg)?;
            let train_refs: Vec<&DomainDataset> = train.iter().collect();
            let union_train = DomainDataset::concat("uni-ms", &train_refs)?;
            let validation = match validation {
                Validation::HeldOut(parts) => {
                    let refs: Vec<&DomainDataset> = parts.iter().collect();
                    Validation::HeldOut(vec![DomainDataset::concat("uni-ms-heldout", &refs)?])
                }
                labeled => labeled,
            };
            let union_full = DomainDataset::concat("uni-ms", &full)?;
            let out = train_single_model(
                vec![union_full.name.clone()],
                vec![union_train],
                validation,
                &[&union_full],
                inputs,
                false,
                cfg,
            )?;
            Ok(report(out, None, Vec::new()))
        }
        Mode::BestSs => {
            let labeled_target = inputs.target.filter(|t| t.is_labeled());
            let mut best: Option<(usize, f64, TrainOutcome)> = None;
            let mut candidates = Vec::new();
            for (i, src) in full.iter().enumerate() {
                let (train, validation) = prepare(&[*src], inputs, cfg)?;
                let out = train_single_model(vec![src.name.clone()], train, validation, &[*src], inputs, false, cfg)?;
                let target_accuracy = labeled_target
                    .map(|t| evaluate(&out.model, t))
                    .transpose()?
                    .and_then(|e| e.accuracy);
                let key = target_accuracy.unwrap_or(out.best_valid);
                candidates.push(CandidateScore {
                    source: src.name.clone(),
                    best_valid: out.best_valid,
                    target_accuracy,
                });
                if best.as_ref().is_none_or(|b| key > b.1) {
                    best = Some((i, key, out));
                }
            }
            let (i, _, out) = best.expect("at least one source");
            Ok(report(out, Some(i), candidates))
        }
        Mode::Moe => Err(Error::invalid("train_baseline expects best-ss or uni-ms")),
    }
}

/// Prediction for one unit together with its mixture weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaRecord {
    pub example: usize,
    /// Token position for tagging, 0 otherwise.
    pub unit: usize,
    pub label: Option<usize>,
    pub predicted: usize,
    pub alpha: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// `None` when the dataset has no labels.
    pub accuracy: Option<f64>,
    pub correct: usize,
    pub total: usize,
    /// Mean α per expert over all units.
    pub mean_alpha: Vec<f64>,
    pub records: Vec<AlphaRecord>,
}

/// Scores every unit of `dataset` with all experts and the model's
/// full-domain statistics.
pub fn evaluate(model: &Model, dataset: &DomainDataset) -> Result<Evaluation> {
    if dataset.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty dataset"));
    }
    if dataset.task != model.config.task {
        return Err(Error::invalid(format!(
            "{} model cannot score {} data",
            model.config.task, dataset.task
        )));
    }
    if dataset.task == Task::Classification && dataset.input_dim != model.config.input_dim {
        return Err(Error::invalid(format!(
            "model expects {} features, dataset has {}",
            model.config.input_dim, dataset.input_dim
        )));
    }
    if model.is_mixture() && model.source_stats.len() != model.num_experts() {
        return Err(Error::contract("model has no full-domain statistics"));
    }
    let k = model.num_experts();
    let active: Vec<usize> = (0..k).collect();
    let labeled = dataset.is_labeled();
    let mut records = Vec::new();
    let (mut correct, mut total) = (0, 0);
    let mut alpha_sum = vec![0.0; k];
    for (i, ex) in dataset.examples.iter().enumerate() {
        let labels = ex.unit_labels();
        for (j, out) in predict_over(model, ex, &active, &model.source_stats)?
            .into_iter()
            .enumerate()
        {
            let predicted = argmax(&out.combined);
            let label = labels.as_ref().map(|l| l[j]);
            if let Some(y) = label {
                correct += usize::from(y == predicted);
            }
            total += 1;
            for (s, a) in alpha_sum.iter_mut().zip(&out.alpha) {
                *s += a;
            }
            records.push(AlphaRecord {
                example: i,
                unit: j,
                label,
                predicted,
                alpha: out.alpha,
            });
        }
    }
    if total == 0 {
        return Err(Error::invalid("dataset has no scoreable units"));
    }
    Ok(Evaluation {
        accuracy: labeled.then(|| correct as f64 / total as f64),
        correct,
        total,
        mean_alpha: alpha_sum.iter().map(|s| s / total as f64).collect(),
        records,
    })
}

/// MMD² between the pooled encodings of `sources` and those of `target`.
pub fn encoded_mmd(model: &Model, sources: &[DomainDataset], target: &DomainDataset, mmd: &MmdConfig) -> Result<f64> {
    let parts = sources
        .iter()
        .map(|d| model.encode_dataset(d).map(|(h, _)| h))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<_> = parts.iter().collect();
    let pooled = crate::numerics::DenseMatrix::vstack(&refs)?;
    let (t, _) = model.encode_dataset(target)?;
    mmd_squared(&pooled, &t, mmd)
}

/// Final summary of a run, written as `key=value` lines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub task: Task,
    pub mode: Mode,
    pub adversarial: bool,
    pub seed: u64,
    pub best_epoch: usize,
    pub best_valid: f64,
    pub target: Option<String>,
    pub accuracy: Option<f64>,
    pub units: usize,
    /// Mean α per expert name over the target.
    pub mean_alpha: Vec<(String, f64)>,
}

impl RunMetrics {
    pub fn new(report: &TrainReport, cfg: &TrainConfig, target: Option<(&DomainDataset, &Evaluation)>) -> Self {
        let names = &report.model.source_names;
        Self {
            task: report.model.config.task,
            mode: cfg.mode,
            adversarial: cfg.adversarial,
            seed: cfg.seed,
            best_epoch: report.best_epoch,
            best_valid: report.best_valid,
            target: target.map(|(d, _)| d.name.clone()),
            accuracy: target.and_then(|(_, e)| e.accuracy),
            units: target.map_or(0, |(_, e)| e.total),
            mean_alpha: target
                .map(|(_, e)| names.iter().cloned().zip(e.mean_alpha.iter().copied()).collect())
                .unwrap_or_default(),
        }
    }

    pub fn to_text(&self) -> String {
        let na = || "NA".to_string();
        let mut out = format!(
            "task={}\nmode={}\nadversarial={}\nseed={}\nbest_epoch={}\nbest_valid={}\n",
            self.task, self.mode, self.adversarial, self.seed, self.best_epoch, self.best_valid
        );
        out.push_str(&format!(
            "target={}\naccuracy={}\nunits={}\n",
            self.target.clone().unwrap_or_else(na),
            self.accuracy.map_or_else(na, |a| a.to_string()),
            self.units
        ));
        for (name, a) in &self.mean_alpha {
            out.push_str(&format!("alpha.{name}={a}\n"));
        }
        out
    }

    pub fn write(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// One hyper-parameter combination for [`cross_validate`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub lambda: f64,
    pub eta: f64,
    pub rank: usize,
    pub learning_rate: f64,
}

impl GridPoint {
    pub fn apply(&self, cfg: &TrainConfig) -> TrainConfig {
        TrainConfig {
            lambda: self.lambda,
            eta: self.eta,
            rank: Some(self.rank),
            learning_rate: Some(self.learning_rate),
            ..cfg.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    /// Mean pseudo-target accuracy per grid point.
    pub scores: Vec<f64>,
    pub selected: usize,
}

/// Leave-one-source-out selection: each source in turn is the labeled
/// pseudo-target of a model trained on the others (a single-source model
/// when only one remains). Returns the best mean accuracy, ties to the
/// earliest point.
pub fn cross_validate(sources: &[DomainDataset], base: &TrainConfig, grid: &[GridPoint]) -> Result<CvReport> {
    if grid.is_empty() {
        return Err(Error::invalid("empty hyper-parameter grid"));
    }
    if sources.len() < 2 {
        return Err(Error::invalid("cross-validation needs at least two sources"));
    }
    let mut scores = Vec::with_capacity(grid.len());
    for point in grid {
        let mut cfg = point.apply(base);
        cfg.adversarial = false;
        let mut sum = 0.0;
        for pair in build_meta_pairs(sources.len())? {
            let rest: Vec<DomainDataset> = pair.meta_sources.iter().map(|&i| sources[i].clone()).collect();
            let mut run_cfg = cfg.clone();
            if rest.len() == 1 && run_cfg.mode == Mode::Moe {
                run_cfg.mode = Mode::UniMs;
            }
            let held = &sources[pair.meta_target];
            let out = train(&TrainInputs::new(&rest), &run_cfg)?;
            sum += evaluate(&out.model, held)?
                .accuracy
                .ok_or_else(|| Error::invalid(format!("pseudo-target {} is unlabeled", held.name)))?;
        }
        let mean = sum / sources.len() as f64;
        log::info!("grid point {point:?}: {mean:.4}");
        scores.push(mean);
    }
    let mut selected = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[selected] {
            selected = i;
        }
    }
    Ok(CvReport { scores, selected })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize, SynthSpec};

    fn synth(k: usize, n: usize, seed: u64) -> (Vec<DomainDataset>, DomainDataset) {
        let spec = SynthSpec {
            k: k.max(2),
            dim: 6,
            per_domain_n: n,
            target_n: n,
            seed,
            ..SynthSpec::default()
        };
        let mut d = synthesize(&spec).unwrap();
        d.sources.truncate(k);
        (d.sources, d.target)
    }

    fn quick(mode: Mode) -> TrainConfig {
        TrainConfig {
            mode,
            hidden: 8,
            rank: Some(4),
            max_epochs: 3,
            patience: 2,
            batch_size: 16,
            mmd: MmdConfig::default(),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn meta_pairs() {
        assert!(build_meta_pairs(1).is_err());
        assert_eq!(
            build_meta_pairs(2).unwrap(),
            vec![
                MetaPair {
                    meta_target: 0,
                    meta_sources: vec![1]
                },
                MetaPair {
                    meta_target: 1,
                    meta_sources: vec![0]
                },
            ]
        );
        let p3 = build_meta_pairs(3).unwrap();
        assert_eq!(p3.len(), 3);
        assert!(p3.iter().all(|p| p.meta_sources.len() == 2));
        let p4 = build_meta_pairs(4).unwrap();
        for s in 0..4 {
            assert_eq!(p4.iter().filter(|p| p.meta_sources.contains(&s)).count(), 3);
        }
        for p in &p4 {
            let mut all = p.meta_sources.clone();
            all.push(p.meta_target);
            all.sort();
            assert_eq!(all, vec![0, 1, 2, 3]);
        }
    }

    #[test]
    fn batch_stream_covers_each_index_once_per_pass() {
        let mut s = BatchStream::new(10, 3, 0).unwrap();
        let mut seen: Vec<usize> = (0..3).flat_map(|_| s.next_batch(3)).collect();
        assert_eq!(seen.len(), 9);
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 9);
        assert_eq!(s.next_batch(20).len(), 10);
        assert!(BatchStream::new(0, 0, 0).is_err());
    }

    #[test]
    fn steps_per_epoch_uses_smallest_source() {
        let (mut sources, _) = synth(3, 40, 1);
        sources[1] = sources[1].subset("small", &(0..21).collect::<Vec<_>>());
        let cfg = TrainConfig {
            batch_size: 10,
            ..quick(Mode::Moe)
        };
        let refs: Vec<&DomainDataset> = sources.iter().collect();
        let mut rng = seeded_rng(0, 0);
        let names = sources.iter().map(|d| d.name.clone()).collect();
        let model = Model::new(
            cfg.model_config(&refs).unwrap(),
            names,
            sources[0].label_set.clone(),
            None,
            true,
            &mut rng,
        )
        .unwrap();
        let session = TrainSession::new(model, sources, None, &cfg).unwrap();
        assert_eq!(session.steps_per_epoch(), 3);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig {
                batch_size: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                learning_rate: Some(0.0),
                ..TrainConfig::default()
            },
            TrainConfig {
                patience: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                lambda: 1.5,
                ..TrainConfig::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn learning_rate_defaults_follow_density() {
        let (sources, _) = synth(2, 20, 0);
        let refs: Vec<&DomainDataset> = sources.iter().collect();
        assert_eq!(TrainConfig::default().resolve_learning_rate(&refs), 1e-3);
        let mut sparse = sources[0].clone();
        for ex in &mut sparse.examples {
            if let Example::Vector { features, .. } = ex {
                for v in features.iter_mut().skip(1) {
                    *v = 0.0;
                }
            }
        }
        assert_eq!(TrainConfig::default().resolve_learning_rate(&[&sparse]), 1e-4);
    }

    #[test]
    fn same_seed_same_trajectory() {
        let (sources, target) = synth(3, 60, 2);
        let cfg = TrainConfig {
            adversarial: true,
            ..quick(Mode::Moe)
        };
        let inputs = TrainInputs::new(&sources).with_target(&target);
        let a = train(&inputs, &cfg).unwrap();
        let b = train(&inputs, &cfg).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn zero_gamma_matches_non_adversarial_run() {
        let (sources, target) = synth(2, 50, 4);
        let inputs = TrainInputs::new(&sources).with_target(&target);
        let plain = train(&inputs, &quick(Mode::Moe)).unwrap();
        let gated = train(
            &inputs,
            &TrainConfig {
                adversarial: true,
                gamma: 0.0,
                ..quick(Mode::Moe)
            },
        )
        .unwrap();
        assert_eq!(plain.model.params, gated.model.params);
        assert_eq!(plain.history, gated.history);
        assert!(plain.history[0].losses.adv > 0.0);
        let adv = train(
            &inputs,
            &TrainConfig {
                adversarial: true,
                ..quick(Mode::Moe)
            },
        )
        .unwrap();
        assert_ne!(adv.model.params, plain.model.params);
    }

    #[test]
    fn adversarial_without_target_is_a_config_error() {
        let (sources, _) = synth(2, 30, 0);
        let cfg = TrainConfig {
            adversarial: true,
            ..quick(Mode::Moe)
        };
        assert!(matches!(
            train(&TrainInputs::new(&sources), &cfg),
            Err(Error::Config(_))
        ));
        assert!(train(&TrainInputs::new(&sources[..1]), &quick(Mode::Moe)).is_err());
    }

    #[test]
    fn single_step_loss_matches_recomposed_components() {
        let (sources, target) = synth(2, 8, 5);
        let cfg = TrainConfig {
            batch_size: 8,
            adversarial: true,
            lambda: 0.3,
            gamma: 0.7,
            eta: 0.2,
            ..quick(Mode::Moe)
        };
        let refs: Vec<&DomainDataset> = sources.iter().collect();
        let mut rng = seeded_rng(0, 0);
        let names = sources.iter().map(|d| d.name.clone()).collect();
        let model = Model::new(
            cfg.model_config(&refs).unwrap(),
            names,
            sources[0].label_set.clone(),
            None,
            true,
            &mut rng,
        )
        .unwrap();
        let mut session = TrainSession::new(model, sources, Some(target.unlabeled()), &cfg).unwrap();
        assert_eq!(session.steps_per_epoch(), 1);
        let l = session.train_epoch().unwrap();
        let j = crate::moe::joint_loss(l.moe, l.mtl, l.adv, l.entropy, &cfg.loss_weights()).unwrap();
        assert!((j.total - l.total).abs() < 1e-12);
    }

    #[test]
    fn early_stopping_keeps_best_epoch() {
        let (sources, _) = synth(2, 60, 6);
        let cfg = TrainConfig {
            max_epochs: 8,
            patience: 1,
            ..quick(Mode::Moe)
        };
        let r = train(&TrainInputs::new(&sources), &cfg).unwrap();
        let best = r.history.iter().map(|e| e.valid_accuracy).fold(f64::MIN, f64::max);
        assert_eq!(r.best_valid, best);
        let first_best = r.history.iter().find(|e| e.valid_accuracy == best).unwrap().epoch;
        assert_eq!(r.best_epoch, first_best);
        let after = r.history.len() - r.best_epoch;
        assert!(after <= cfg.patience);
        assert!(r.history.len() == cfg.max_epochs || after == cfg.patience);
    }

    #[test]
    fn baselines_have_no_metric() {
        let (sources, target) = synth(3, 40, 7);
        let inputs = TrainInputs::new(&sources).with_target(&target);
        let uni = train(&inputs, &quick(Mode::UniMs)).unwrap();
        assert_eq!(uni.model.num_experts(), 1);
        assert!(!uni.model.is_mixture());
        let ss = train(&inputs, &quick(Mode::BestSs)).unwrap();
        assert_eq!(ss.candidates.len(), 3);
        let sel = ss.selected_source.unwrap();
        let best = ss
            .candidates
            .iter()
            .map(|c| c.target_accuracy.unwrap())
            .fold(f64::MIN, f64::max);
        assert_eq!(ss.candidates[sel].target_accuracy.unwrap(), best);
        assert_eq!(evaluate(&ss.model, &target).unwrap().accuracy.unwrap(), best);
    }

    #[test]
    fn one_source_baselines_coincide() {
        let (sources, target) = synth(1, 40, 8);
        let inputs = TrainInputs::new(&sources).with_target(&target);
        let uni = train(&inputs, &quick(Mode::UniMs)).unwrap();
        let ss = train(&inputs, &quick(Mode::BestSs)).unwrap();
        assert_eq!(uni.model.params, ss.model.params);
        assert_eq!(uni.history, ss.history);
    }

    #[test]
    fn uni_ms_on_duplicated_source_is_training_on_the_doubled_set() {
        let (sources, target) = synth(1, 30, 9);
        let valid = split(&target, 0.5, 0).unwrap().0;
        let dup = vec![sources[0].clone(), sources[0].clone()];
        let doubled = vec![DomainDataset::concat("x", &[&sources[0], &sources[0]]).unwrap()];
        let cfg = quick(Mode::UniMs);
        let mut a_in = TrainInputs::new(&dup);
        a_in.validation = Some(&valid);
        let mut b_in = TrainInputs::new(&doubled);
        b_in.validation = Some(&valid);
        let a = train(&a_in, &cfg).unwrap();
        let b = train(&b_in, &cfg).unwrap();
        assert_eq!(a.model.params, b.model.params);
    }

    #[test]
    fn evaluate_counts_and_errors() {
        let (sources, target) = synth(2, 30, 10);
        let r = train(&TrainInputs::new(&sources), &quick(Mode::Moe)).unwrap();
        let e = evaluate(&r.model, &target).unwrap();
        assert_eq!(e.total, target.len());
        assert_eq!(e.records.len(), target.len());
        let hand = e.records.iter().filter(|x| x.label == Some(x.predicted)).count();
        assert_eq!(e.correct, hand);
        assert_eq!(e.accuracy.unwrap(), hand as f64 / target.len() as f64);
        assert!((e.mean_alpha.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(evaluate(&r.model, &target.unlabeled()).unwrap().accuracy.is_none());
        assert!(evaluate(&r.model, &target.subset("empty", &[])).is_err());
    }

    #[test]
    fn cross_validation_selection() {
        let spec = SynthSpec {
            k: 2,
            dim: 6,
            per_domain_n: 40,
            domain_shift: 0.0,
            seed: 11,
            ..SynthSpec::default()
        };
        let sources = synthesize(&spec).unwrap().sources;
        let base = quick(Mode::Moe);
        assert!(cross_validate(&sources, &base, &[]).is_err());
        let good = GridPoint {
            lambda: 0.5,
            eta: 0.01,
            rank: 4,
            learning_rate: 1e-2,
        };
        let single = cross_validate(&sources, &base, &[good]).unwrap();
        assert_eq!(single.selected, 0);
        let frozen = GridPoint {
            learning_rate: 1e-12,
            ..good
        };
        let r = cross_validate(&sources, &base, &[frozen, good]).unwrap();
        assert_eq!(r.scores.len(), 2);
        assert_eq!(r.selected, 1, "{:?}", r.scores);
    }
}
