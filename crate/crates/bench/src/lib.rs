//! Shared fixtures for the benchmarks.

use mdmoe::data::synthesize;
use mdmoe::numerics::seeded_rng;
use mdmoe::{DenseMatrix, SynthData, SynthSpec};

/// Standard-normal `rows x cols` matrix from `seed`.
pub fn gaussian_matrix(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
    DenseMatrix::random_normal(rows, cols, 1.0, &mut seeded_rng(seed, 0))
}

/// Three shifted domains of `n` examples in `dim` dimensions.
pub fn domains(n: usize, dim: usize) -> SynthData {
    synthesize(&SynthSpec {
        k: 3,
        dim,
        per_domain_n: n,
        target_n: n,
        seed: 1,
        ..SynthSpec::default()
    })
    .expect("valid spec")
}
