//! Kernel two-sample discrepancy (squared MMD) between pooled source
//! encodings and target encodings, used as a non-parametric adversary.
//!
//! The estimator is the biased V-statistic
//! `(1/m²)Σκ(s,s′) + (1/n²)Σκ(t,t′) − (2/mn)Σκ(s,t)`, which is never negative.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{squared_distance, DenseMatrix, KernelBank};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct MmdConfig {
    pub bank: KernelBank,
}

fn check(source: &DenseMatrix, target: &DenseMatrix) -> Result<()> {
    if source.rows() == 0 || target.rows() == 0 {
        return Err(Error::invalid("MMD needs non-empty source and target batches"));
    }
    if source.cols() != target.cols() {
        return Err(Error::invalid(format!(
            "MMD batches differ in width: {} vs {}",
            source.cols(),
            target.cols()
        )));
    }
    Ok(())
}

/// Squared MMD between the rows of `source` and the rows of `target`.
pub fn mmd_squared(source: &DenseMatrix, target: &DenseMatrix, cfg: &MmdConfig) -> Result<f64> {
    check(source, target)?;
    let within = |x: &DenseMatrix| -> f64 {
        let n = x.rows();
        let mut acc = 0.0;
        for a in 0..n {
            // diagonal terms are exactly |bank|
            acc += cfg.bank.len() as f64;
            for b in a + 1..n {
                acc += 2.0 * cfg.bank.eval_sq(squared_distance(x.row(a), x.row(b)));
            }
        }
        acc / (n * n) as f64
    };
    let mut cross = 0.0;
    for s in source.iter_rows() {
        for t in target.iter_rows() {
            cross += cfg.bank.eval_sq(squared_distance(s, t));
        }
    }
    let (m, n) = (source.rows() as f64, target.rows() as f64);
    Ok(within(source) + within(target) - 2.0 * cross / (m * n))
}

/// Squared MMD and its gradients with respect to every source and target row.
pub fn mmd_gradient(
    source: &DenseMatrix,
    target: &DenseMatrix,
    cfg: &MmdConfig,
) -> Result<(f64, DenseMatrix, DenseMatrix)> {
    check(source, target)?;
    let (m, n) = (source.rows(), target.rows());
    let width = source.cols();
    let mut ds = DenseMatrix::zeros(m, width);
    let mut dt = DenseMatrix::zeros(n, width);
    let bank_len = cfg.bank.len() as f64;

    // κ = f(‖a − b‖²), so ∂κ/∂a = 2 f′ (a − b).
    let within = |x: &DenseMatrix, dx: &mut DenseMatrix| -> f64 {
        let rows = x.rows();
        let norm = 1.0 / (rows * rows) as f64;
        let mut acc = bank_len * rows as f64;
        for a in 0..rows {
            for b in a + 1..rows {
                let sq = squared_distance(x.row(a), x.row(b));
                let (k, slope) = cfg.bank.eval_sq_with_slope(sq);
                acc += 2.0 * k;
                // pair (a,b) appears twice in the double sum
                let coef = 2.0 * norm * 2.0 * slope;
                for j in 0..width {
                    let diff = x[(a, j)] - x[(b, j)];
                    dx[(a, j)] += coef * diff;
                    dx[(b, j)] -= coef * diff;
                }
            }
        }
        acc * norm
    };
    let kss = within(source, &mut ds);
    let ktt = within(target, &mut dt);

    let norm = 2.0 / (m * n) as f64;
    let mut kst = 0.0;
    for a in 0..m {
        for b in 0..n {
            let sq = squared_distance(source.row(a), target.row(b));
            let (k, slope) = cfg.bank.eval_sq_with_slope(sq);
            kst += k;
            let coef = -norm * 2.0 * slope;
            for j in 0..width {
                let diff = source[(a, j)] - target[(b, j)];
                ds[(a, j)] += coef * diff;
                dt[(b, j)] -= coef * diff;
            }
        }
    }
    Ok((kss + ktt - norm * kst, ds, dt))
}
