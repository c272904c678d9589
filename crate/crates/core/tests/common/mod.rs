#![allow(dead_code)]
pub mod flat;

use mdmoe::adversary::MmdConfig;
use mdmoe::data::{Example, Task};
use mdmoe::metric::ConfidenceKind;
use mdmoe::model::{Model, ModelConfig};
use mdmoe::moe::{objective, ComponentWeights, ObjectiveOptions, StepBatch};
use mdmoe::numerics::{finite_diff_grad, gaussian, gradient_mismatch, seeded_rng, KernelBank};
use mdmoe::params::Parameters;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const REL_TOL: f64 = 1e-4;
pub const ABS_FLOOR: f64 = 1e-7;

/// A randomly drawn small problem: model plus per-source batches.
pub struct Toy {
    pub model: Model,
    pub sources: Vec<Vec<Example>>,
    pub target: Vec<Example>,
}

impl Toy {
    pub fn batch(&self, with_target: bool) -> StepBatch<'_> {
        StepBatch {
            sources: self.sources.iter().map(|b| b.iter().collect()).collect(),
            target: with_target.then(|| self.target.iter().collect()),
        }
    }
}

pub struct ToySpec {
    pub task: Task,
    pub confidence: ConfidenceKind,
    pub k: usize,
    pub d_in: usize,
    pub hidden: usize,
    pub rank: usize,
    pub classes: usize,
    pub batch: usize,
    pub bias: bool,
    pub shared_metric: bool,
}

fn labels_for(classes: usize) -> Vec<String> {
    (0..classes).map(|c| format!("c{c}")).collect()
}

fn random_example(spec: &ToySpec, rng: &mut ChaCha8Rng, label: Option<usize>) -> Example {
    match spec.task {
        Task::Classification => Example::Vector {
            features: (0..spec.d_in).map(|_| gaussian(rng)).collect(),
            label,
        },
        Task::SequenceTagging => {
            let len = rng.random_range(1..4);
            let tokens: Vec<usize> = (0..len).map(|_| rng.random_range(0..spec.d_in)).collect();
            let tags = label.map(|first| {
                (0..len)
                    .map(|i| {
                        if i == 0 {
                            first
                        } else {
                            rng.random_range(0..spec.classes)
                        }
                    })
                    .collect()
            });
            Example::Sequence { tokens, tags }
        }
    }
}

/// Draws a toy instance; every source batch contains every class.
pub fn toy(spec: &ToySpec, seed: u64) -> Toy {
    let mut rng = seeded_rng(seed, 77);
    let config = ModelConfig {
        rank: spec.rank,
        confidence: spec.confidence,
        classifier_bias: spec.bias,
        shared_metric: spec.shared_metric,
        emb_dim: 3,
        window_radius: 1,
        ..ModelConfig::for_data(spec.task, spec.d_in, spec.classes, spec.hidden)
    };
    let names = (0..spec.k).map(|i| format!("s{i}")).collect();
    let mut model = Model::new(config, names, labels_for(spec.classes), None, true, &mut rng).unwrap();
    // Larger metric factors than the training init so confidences vary.
    for u in &mut model.params.metrics {
        u.scale(5.0);
    }
    let sources = (0..spec.k)
        .map(|_| {
            (0..spec.batch)
                .map(|i| random_example(spec, &mut rng, Some(i % spec.classes)))
                .collect()
        })
        .collect();
    let target = (0..spec.batch).map(|_| random_example(spec, &mut rng, None)).collect();
    Toy { model, sources, target }
}

pub fn small_bank() -> MmdConfig {
    MmdConfig {
        bank: KernelBank::new(vec![0.5, 2.0, 8.0]).unwrap(),
    }
}

/// Compares analytic and central-difference gradients of the weighted
/// objective. Returns the worst relative error seen, or the first mismatch.
pub fn check_gradient(
    toy: &Toy,
    weights: impl Into<ComponentWeights>,
    with_target: bool,
    mmd: &MmdConfig,
) -> Result<f64, String> {
    let opts = ObjectiveOptions {
        weights: weights.into(),
        mmd,
        stop_grad_means: false,
        fallback_stats: None,
    };
    let batch = toy.batch(with_target);
    let out = objective(&toy.model, &batch, &opts, true).map_err(|e| e.to_string())?;
    let analytic = out.grads.expect("requested").flatten();
    let theta = toy.model.params.flatten();
    let mut probe = toy.model.clone();
    let numeric = finite_diff_grad(
        |x| {
            probe.params.assign_flat(x);
            objective(&probe, &batch, &opts, false).unwrap().losses.total
        },
        &theta,
        1e-6,
    )
    .map_err(|e| e.to_string())?;
    if let Some((i, a, n)) = gradient_mismatch(&analytic, &numeric, REL_TOL, ABS_FLOOR) {
        let names = toy.model.params.tensor_names();
        let mut offset = 0;
        let mut which = String::new();
        for (name, t) in names.iter().zip(toy.model.params.tensors()) {
            if i < offset + t.len() {
                which = format!("{name}[{}]", i - offset);
                break;
            }
            offset += t.len();
        }
        return Err(format!("{which}: analytic {a:e} vs numeric {n:e}"));
    }
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| {
            let d = (a - n).abs();
            if d <= ABS_FLOOR {
                0.0
            } else {
                d / a.abs().max(n.abs())
            }
        })
        .fold(0.0, f64::max))
}

pub fn component(name: &str) -> ComponentWeights {
    let mut w = ComponentWeights {
        moe: 0.0,
        mtl: 0.0,
        adv: 0.0,
        entropy: 0.0,
    };
    match name {
        "moe" => w.moe = 1.0,
        "mtl" => w.mtl = 1.0,
        "adv" => w.adv = 1.0,
        "entropy" => w.entropy = 1.0,
        other => panic!("unknown component {other}"),
    }
    w
}
