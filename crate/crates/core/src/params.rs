//! Uniform view over parameter tensors, used by the optimizer, the
//! finite-difference checks and checkpointing.

use crate::numerics::DenseMatrix;

/// A fixed, ordered collection of parameter tensors.
pub trait Parameters {
    fn tensors(&self) -> Vec<&DenseMatrix>;

    fn tensors_mut(&mut self) -> Vec<&mut DenseMatrix>;

    /// Same structure with every entry zero.
    fn zeros_like(&self) -> Self
    where
        Self: Sized;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for t in self.tensors() {
            out.extend_from_slice(t.as_slice());
        }
        out
    }

    /// Overwrites every entry from a flat vector in [`Parameters::flatten`] order.
    fn assign_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params(), "flat parameter length");
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.as_mut_slice().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
    }

    /// `self += scale · other` for a structurally identical set.
    fn add_scaled(&mut self, scale: f64, other: &Self)
    where
        Self: Sized,
    {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            crate::numerics::axpy(scale, b.as_slice(), a.as_mut_slice());
        }
    }
}
