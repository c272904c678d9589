//! Multi-source domain adaptation with a mixture of per-source experts.
//!
//! A shared encoder feeds one classifier per labeled source domain. Each
//! expert's vote is weighted by how close an example lies to that source
//! under a learned low-rank Mahalanobis metric. Training rotates every
//! source through the role of a held-out pseudo-target, optionally aligns
//! source and target encodings with a kernel MMD penalty, and stops early
//! on held-out accuracy.

pub mod adversary;
pub mod data;
pub mod encoder;
pub mod error;
pub mod metric;
pub mod model;
pub mod moe;
pub mod numerics;
pub mod optim;
pub mod params;
pub mod trainer;

pub use adversary::MmdConfig;
pub use data::{DomainDataset, Example, SynthData, SynthSpec, Task, Vocabulary};
pub use error::{Error, Result};
pub use metric::{ConfidenceKind, DomainStats};
pub use model::{Model, ModelConfig, ModelParams};
pub use moe::{LossBreakdown, LossWeights, MixtureOutput};
pub use numerics::{DenseMatrix, KernelBank};
pub use params::Parameters;
pub use trainer::{Evaluation, Mode, RunMetrics, TrainConfig, TrainInputs, TrainReport};
