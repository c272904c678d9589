//! Dense kernels shared by every other module: a row-major matrix type,
//! stable softmax and cross-entropy, the multi-bandwidth RBF kernel, seeded
//! random streams, and a central-difference gradient oracle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probability floor used by [`cross_entropy`].
pub const PROB_FLOOR: f64 = 1e-12;

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "matrix data length {} != {rows} x {cols}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite matrix entry at {i}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("ragged rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    /// Gaussian entries with the given standard deviation.
    pub fn random_normal<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols).map(|_| gaussian(rng) * std).collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics, so handle the degenerate width separately.
        let cols = self.cols.max(1);
        self.data
            .chunks_exact(cols)
            .take(if self.cols == 0 { 0 } else { self.rows })
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    /// `self · v`
    pub fn mul_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::invalid(format!(
                "matrix-vector mismatch: {}x{} by {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        Ok(self.iter_rows().map(|r| dot(r, v)).collect())
    }

    /// `selfᵀ · v`
    pub fn t_mul_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.rows {
            return Err(Error::invalid(format!(
                "transposed matrix-vector mismatch: {}x{} by {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        let mut out = vec![0.0; self.cols];
        for (r, &s) in self.iter_rows().zip(v) {
            axpy(s, r, &mut out);
        }
        Ok(out)
    }

    /// `self · other`
    pub fn matmul(&self, other: &DenseMatrix) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::invalid(format!(
                "matmul mismatch: {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a != 0.0 {
                    axpy(a, other.row(k), dst);
                }
            }
        }
        Ok(out)
    }

    /// `self += scale · u vᵀ`
    pub fn add_outer(&mut self, scale: f64, u: &[f64], v: &[f64]) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        for (i, &ui) in u.iter().enumerate() {
            let s = scale * ui;
            if s != 0.0 {
                axpy(s, v, self.row_mut(i));
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn add_assign(&mut self, other: &DenseMatrix) {
        debug_assert_eq!(self.shape(), other.shape());
        axpy(1.0, &other.data, &mut self.data);
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stacks matrices of equal width vertically.
    pub fn vstack(parts: &[&DenseMatrix]) -> Result<Self> {
        let cols = parts.first().map_or(0, |m| m.cols);
        if parts.iter().any(|m| m.cols != cols) {
            return Err(Error::invalid("vstack width mismatch"));
        }
        let rows = parts.iter().map(|m| m.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for m in parts {
            data.extend_from_slice(&m.data);
        }
        Ok(Self { rows, cols, data })
    }
}

impl std::ops::Index<(usize, usize)> for DenseMatrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for DenseMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += a · x`
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Softmax computed with max-subtraction.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::invalid("softmax of an empty vector"));
    }
    Ok(softmax_unchecked(v))
}

pub(crate) fn softmax_unchecked(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= total);
    out
}

/// `-ln p[label]` with `p[label]` clamped at [`PROB_FLOOR`].
pub fn cross_entropy(p: &[f64], label: usize) -> Result<f64> {
    let &pl = p
        .get(label)
        .ok_or_else(|| Error::invalid(format!("label {label} out of range for {} classes", p.len())))?;
    Ok(-pl.max(PROB_FLOOR).ln())
}

/// Bandwidths of a sum-of-RBF kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelBank {
    bandwidths: Vec<f64>,
}

impl KernelBank {
    pub fn new(bandwidths: Vec<f64>) -> Result<Self> {
        if bandwidths.is_empty() {
            return Err(Error::invalid("kernel bank needs at least one bandwidth"));
        }
        if bandwidths.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::invalid("kernel bandwidths must be positive and finite"));
        }
        Ok(Self { bandwidths })
    }

    /// `count` bandwidths spaced uniformly in log10 over `[lo, hi]`, endpoints included.
    pub fn log_spaced(lo: f64, hi: f64, count: usize) -> Result<Self> {
        if count == 0 || !(lo > 0.0 && hi >= lo) {
            return Err(Error::invalid("log_spaced needs 0 < lo <= hi and count > 0"));
        }
        if count == 1 {
            return Self::new(vec![lo]);
        }
        let (a, b) = (lo.log10(), hi.log10());
        let step = (b - a) / (count - 1) as f64;
        Self::new((0..count).map(|i| 10f64.powf(a + step * i as f64)).collect())
    }

    pub fn bandwidths(&self) -> &[f64] {
        &self.bandwidths
    }

    pub fn len(&self) -> usize {
        self.bandwidths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bandwidths.is_empty()
    }

    /// `Σ_n exp(-sq / (2σ_n))` for a precomputed squared distance.
    pub fn eval_sq(&self, sq: f64) -> f64 {
        self.bandwidths.iter().map(|s| (-sq / (2.0 * s)).exp()).sum()
    }

    /// Kernel value and its derivative with respect to the squared distance.
    pub fn eval_sq_with_slope(&self, sq: f64) -> (f64, f64) {
        self.bandwidths.iter().fold((0.0, 0.0), |(k, dk), s| {
            let e = (-sq / (2.0 * s)).exp();
            (k + e, dk - e / (2.0 * s))
        })
    }
}

impl Default for KernelBank {
    /// 19 bandwidths from 1e-6 to 1e6.
    fn default() -> Self {
        Self::log_spaced(1e-6, 1e6, 19).expect("static bank")
    }
}

/// `κ(a, b) = Σ_n exp(-‖a − b‖² / (2σ_n))`
pub fn rbf_kernel_bank(a: &[f64], b: &[f64], bank: &KernelBank) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "kernel arguments differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(bank.eval_sq(squared_distance(a, b)))
}

/// Central-difference gradient of `f` at `theta`.
pub fn finite_diff_grad<F>(mut f: F, theta: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(eps > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let mut x = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for k in 0..theta.len() {
        x[k] = theta[k] + eps;
        let hi = f(&x);
        x[k] = theta[k] - eps;
        let lo = f(&x);
        x[k] = theta[k];
        if !hi.is_finite() || !lo.is_finite() {
            return Err(Error::Numerical(format!(
                "objective not finite when perturbing coordinate {k}"
            )));
        }
        grad.push((hi - lo) / (2.0 * eps));
    }
    Ok(grad)
}

/// First coordinate where `analytic` and `numeric` disagree beyond both the
/// relative tolerance and the absolute floor.
pub fn gradient_mismatch(analytic: &[f64], numeric: &[f64], rel_tol: f64, abs_floor: f64) -> Option<(usize, f64, f64)> {
    analytic
        .iter()
        .zip(numeric)
        .enumerate()
        .find(|(_, (a, n))| {
            let diff = (*a - *n).abs();
            diff > abs_floor && diff > rel_tol * a.abs().max(n.abs())
        })
        .map(|(i, (a, n))| (i, *a, *n))
}

/// Seeded ChaCha stream. Distinct `stream` values give independent sequences
/// for the same seed.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn gaussian<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Fisher-Yates permutation of `0..n`.
pub fn permutation<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        for p in softmax(&[1000.0, 1000.0, 1000.0]).unwrap() {
            assert_abs_diff_eq!(p, 1.0 / 3.0, epsilon = 1e-15);
        }
        let p = softmax(&[1.0, 0.0]).unwrap();
        let e = std::f64::consts::E;
        assert_abs_diff_eq!(p[0], e / (e + 1.0), epsilon = 1e-12);
        assert_abs_diff_eq!(p[0], 0.7311, epsilon = 1e-4);
        assert_abs_diff_eq!(p[1], 0.2689, epsilon = 1e-4);
        assert!(matches!(softmax(&[]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn cross_entropy_examples() {
        assert_eq!(cross_entropy(&[1.0, 0.0], 0).unwrap(), 0.0);
        assert_abs_diff_eq!(cross_entropy(&[0.5, 0.5], 1).unwrap(), 2f64.ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(cross_entropy(&[0.2, 0.8], 0).unwrap(), 1.6094, epsilon = 1e-4);
        assert_abs_diff_eq!(cross_entropy(&[1.0, 0.0], 1).unwrap(), -PROB_FLOOR.ln());
        assert!(cross_entropy(&[0.5, 0.5], 2).is_err());
    }

    #[test]
    fn kernel_bank_examples() {
        let bank = KernelBank::default();
        assert_eq!(bank.len(), 19);
        assert_abs_diff_eq!(bank.bandwidths()[0], 1e-6, epsilon = 1e-18);
        assert_abs_diff_eq!(bank.bandwidths()[18], 1e6, epsilon = 1e-6);
        let h = [0.3, -1.2, 4.0];
        assert_eq!(rbf_kernel_bank(&h, &h, &bank).unwrap(), 19.0);

        let single = KernelBank::new(vec![1.0]).unwrap();
        assert_abs_diff_eq!(
            rbf_kernel_bank(&[0.0], &[2.0], &single).unwrap(),
            (-2f64).exp(),
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            rbf_kernel_bank(&[0.0], &[2.0], &single).unwrap(),
            0.1353,
            epsilon = 1e-4
        );
        assert!(rbf_kernel_bank(&[0.0], &[1.0, 2.0], &bank).is_err());
        assert!(KernelBank::new(vec![]).is_err());
        assert!(KernelBank::new(vec![1.0, 0.0]).is_err());
    }

    #[test]
    fn finite_diff_examples() {
        let g = finite_diff_grad(|t| t[0] * t[0], &[3.0], 1e-5).unwrap();
        assert_abs_diff_eq!(g[0], 6.0, epsilon = 1e-6);

        let g = finite_diff_grad(|_| 4.2, &[1.0, -2.0, 0.5], 1e-5).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));

        let mut rng = seeded_rng(11, 0);
        let z: Vec<f64> = (0..4).map(|_| gaussian(&mut rng)).collect();
        let label = 2;
        let numeric = finite_diff_grad(|t| cross_entropy(&softmax(t).unwrap(), label).unwrap(), &z, 1e-5).unwrap();
        let mut analytic = softmax(&z).unwrap();
        analytic[label] -= 1.0;
        for (a, n) in analytic.iter().zip(&numeric) {
            assert_abs_diff_eq!(a, n, epsilon = 1e-6);
        }

        let err = finite_diff_grad(|t| if t[1] > 0.5 { f64::NAN } else { 0.0 }, &[0.0, 0.5], 1e-3).unwrap_err();
        assert!(err.to_string().contains("coordinate 1"));
    }

    #[test]
    fn finite_diff_matches_quadratic_form() {
        let mut rng = seeded_rng(3, 1);
        let a = DenseMatrix::random_normal(5, 5, 1.0, &mut rng);
        let theta: Vec<f64> = (0..5).map(|_| gaussian(&mut rng)).collect();
        let f = |x: &[f64]| dot(x, &a.mul_vec(x).unwrap());
        // ∇ xᵀAx = (A + Aᵀ)x
        let ax = a.mul_vec(&theta).unwrap();
        let atx = a.t_mul_vec(&theta).unwrap();
        let analytic: Vec<f64> = ax.iter().zip(&atx).map(|(p, q)| p + q).collect();
        let numeric = finite_diff_grad(f, &theta, 1e-5).unwrap();
        assert_eq!(gradient_mismatch(&analytic, &numeric, 1e-6, 1e-9), None);
    }

    #[test]
    fn matrix_basics() {
        let a = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let b = DenseMatrix::from_rows(&[vec![1.0, 0.0, 2.0], vec![0.0, 1.0, -1.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.row(2), &[5.0, 6.0, 4.0]);
        assert_eq!(a.transpose().row(1), &[2.0, 4.0, 6.0]);
        assert_eq!(a.t_mul_vec(&[1.0, 1.0, 1.0]).unwrap(), vec![9.0, 12.0]);
        assert!(DenseMatrix::new(2, 2, vec![1.0; 3]).is_err());
        assert!(DenseMatrix::new(1, 1, vec![f64::INFINITY]).is_err());
        assert_eq!(DenseMatrix::zeros(3, 0).iter_rows().count(), 0);
    }

    proptest! {
        #[test]
        fn softmax_normalizes(v in proptest::collection::vec(-1e6f64..1e6, 1..12)) {
            let p = softmax(&v).unwrap();
            let total: f64 = p.iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
            prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }

        #[test]
        fn kernel_symmetric_and_monotone(
            a in proptest::collection::vec(-5f64..5.0, 3),
            b in proptest::collection::vec(-5f64..5.0, 3),
            t in 1.0f64..3.0,
        ) {
            let bank = KernelBank::default();
            let kab = rbf_kernel_bank(&a, &b, &bank).unwrap();
            prop_assert_eq!(kab, rbf_kernel_bank(&b, &a, &bank).unwrap());
            prop_assert!(kab > 0.0 && kab <= 19.0);
            // stretching b away from a along the same ray cannot increase κ
            let far: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + t * (y - x)).collect();
            prop_assert!(rbf_kernel_bank(&a, &far, &bank).unwrap() <= kab + 1e-12);
        }
    }
}
