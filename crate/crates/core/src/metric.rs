//! Point-to-set Mahalanobis metric with a low-rank PSD factor `M = U Uᵀ`,
//! the domain statistics it is measured against, the two confidence
//! functions and their normalization into mixture weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, softmax_unchecked, DenseMatrix};

/// Added under the square root so that `∂d` stays finite at `d = 0`.
pub const DISTANCE_EPS: f64 = 1e-12;

/// Mean encoding of a domain (or batch), plus per-class means when labels
/// are known and every class is represented.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainStats {
    pub mean: Vec<f64>,
    pub class_means: Option<Vec<Vec<f64>>>,
    pub support_count: usize,
    /// Classes with no members; non-empty means `class_means` was omitted.
    #[serde(default)]
    pub missing_classes: Vec<usize>,
}

/// Means of the rows of `encodings`, and per-class means when `labels` are given.
pub fn compute_domain_stats(encodings: &DenseMatrix, labels: Option<(&[usize], usize)>) -> Result<DomainStats> {
    let n = encodings.rows();
    if n == 0 {
        return Err(Error::invalid("domain statistics need at least one encoding"));
    }
    let h = encodings.cols();
    let mut mean = vec![0.0; h];
    for row in encodings.iter_rows() {
        crate::numerics::axpy(1.0, row, &mut mean);
    }
    mean.iter_mut().for_each(|v| *v /= n as f64);

    let mut missing_classes = Vec::new();
    let class_means = match labels {
        None => None,
        Some((labels, classes)) => {
            if labels.len() != n {
                return Err(Error::invalid(format!("{} labels for {n} encodings", labels.len())));
            }
            let mut sums = vec![vec![0.0; h]; classes];
            let mut counts = vec![0usize; classes];
            for (row, &y) in encodings.iter_rows().zip(labels) {
                if y >= classes {
                    return Err(Error::invalid(format!("label {y} out of range")));
                }
                crate::numerics::axpy(1.0, row, &mut sums[y]);
                counts[y] += 1;
            }
            missing_classes = (0..classes).filter(|&c| counts[c] == 0).collect();
            if missing_classes.is_empty() {
                Some(
                    sums.into_iter()
                        .zip(&counts)
                        .map(|(s, &c)| s.into_iter().map(|v| v / c as f64).collect())
                        .collect(),
                )
            } else {
                log::warn!("classes {missing_classes:?} have no members; class means omitted");
                None
            }
        }
    };
    Ok(DomainStats {
        mean,
        class_means,
        support_count: n,
        missing_classes,
    })
}

/// Intermediates of one distance evaluation, kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct DistanceTrace {
    pub d: f64,
    /// `h − center`
    pub diff: Vec<f64>,
    /// `Uᵀ (h − center)`
    pub proj: Vec<f64>,
}

impl DistanceTrace {
    /// `∂d/∂h` (equal to `−∂d/∂center`): `U Uᵀ (h − c) / d`.
    pub fn grad_point(&self, u: &DenseMatrix) -> Vec<f64> {
        let mut g = u.mul_vec(&self.proj).expect("traced shapes");
        g.iter_mut().for_each(|v| *v /= self.d);
        g
    }

    /// Accumulates `scale · ∂d/∂U = scale · (h − c) projᵀ / d` into `grad_u`.
    pub fn accumulate_grad_u(&self, scale: f64, grad_u: &mut DenseMatrix) {
        grad_u.add_outer(scale / self.d, &self.diff, &self.proj);
    }
}

pub(crate) fn trace_distance(h: &[f64], center: &[f64], u: &DenseMatrix) -> Result<DistanceTrace> {
    if h.len() != center.len() || h.len() != u.rows() {
        return Err(Error::invalid(format!(
            "distance dimensions disagree: point {}, center {}, factor {}x{}",
            h.len(),
            center.len(),
            u.rows(),
            u.cols()
        )));
    }
    let diff: Vec<f64> = h.iter().zip(center).map(|(a, b)| a - b).collect();
    let proj = u.t_mul_vec(&diff)?;
    let d = (dot(&proj, &proj) + DISTANCE_EPS).sqrt();
    Ok(DistanceTrace { d, diff, proj })
}

/// `sqrt(‖Uᵀ(h − center)‖² + ε)`
pub fn point_to_set_distance(h: &[f64], center: &[f64], u: &DenseMatrix) -> Result<f64> {
    trace_distance(h, center, u).map(|t| t.d)
}

/// Which distance-to-confidence map a model uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConfidenceKind {
    /// `|d(x, S⁺) − d(x, S⁻)|`, binary classification only.
    MaxClusterDifference,
    /// `−d(x, S)`
    NegativeDistance,
}

impl std::str::FromStr for ConfidenceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mcd" | "max-cluster-difference" => Ok(Self::MaxClusterDifference),
            "negdist" | "negative-distance" => Ok(Self::NegativeDistance),
            other => Err(Error::invalid(format!("unknown confidence function {other:?}"))),
        }
    }
}

/// Maximum cluster difference `|d(h, μ⁺) − d(h, μ⁻)|`.
pub fn confidence_mcd(h: &[f64], stats: &DomainStats, u: &DenseMatrix) -> Result<f64> {
    let means = stats
        .class_means
        .as_ref()
        .ok_or_else(|| Error::contract("max cluster difference needs per-class means"))?;
    if means.len() != 2 {
        return Err(Error::contract("max cluster difference is defined for two classes"));
    }
    let neg = point_to_set_distance(h, &means[0], u)?;
    let pos = point_to_set_distance(h, &means[1], u)?;
    Ok((pos - neg).abs())
}

/// `−d(h, μ)`
pub fn confidence_negdist(h: &[f64], stats: &DomainStats, u: &DenseMatrix) -> Result<f64> {
    Ok(-point_to_set_distance(h, &stats.mean, u)?)
}

pub fn confidence(kind: ConfidenceKind, h: &[f64], stats: &DomainStats, u: &DenseMatrix) -> Result<f64> {
    match kind {
        ConfidenceKind::MaxClusterDifference => confidence_mcd(h, stats, u),
        ConfidenceKind::NegativeDistance => confidence_negdist(h, stats, u),
    }
}

/// Mixture weights `α_i = exp(e_i) / Σ_j exp(e_j)`, computed shift-stably.
pub fn normalize_alpha(confidences: &[f64]) -> Result<Vec<f64>> {
    if confidences.is_empty() {
        return Err(Error::invalid("no active sources to normalize over"));
    }
    if confidences.iter().any(|e| !e.is_finite()) {
        return Err(Error::Numerical("non-finite confidence score".into()));
    }
    Ok(softmax_unchecked(confidences))
}
