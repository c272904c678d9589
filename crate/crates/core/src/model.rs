//! The trainable model (shared encoder, per-source experts, per-source
//! metric factors), its full-domain statistics, and the checkpoint format.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DomainDataset, Example, Task, Vocabulary};
use crate::encoder::{Encoder, Expert, MlpEncoder, TokenEncoder};
use crate::error::{Error, Result};
use crate::metric::{compute_domain_stats, ConfidenceKind, DomainStats};
use crate::numerics::DenseMatrix;
use crate::params::Parameters;

/// Architecture of a model. Everything needed to rebuild its parameter shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub task: Task,
    /// Feature dimension, or vocabulary size for token input.
    pub input_dim: usize,
    pub num_classes: usize,
    pub hidden: usize,
    pub rank: usize,
    pub confidence: ConfidenceKind,
    pub classifier_bias: bool,
    pub shared_metric: bool,
    pub emb_dim: usize,
    pub window_radius: usize,
}

impl ModelConfig {
    /// Defaults for a dataset: rank `min(hidden, 64)`, cluster-difference
    /// confidence for two-class vectors and negative distance otherwise.
    pub fn for_data(task: Task, input_dim: usize, num_classes: usize, hidden: usize) -> Self {
        let confidence = if task == Task::Classification && num_classes == 2 {
            ConfidenceKind::MaxClusterDifference
        } else {
            ConfidenceKind::NegativeDistance
        };
        Self {
            task,
            input_dim,
            num_classes,
            hidden,
            rank: hidden.min(64),
            confidence,
            classifier_bias: false,
            shared_metric: false,
            emb_dim: 32,
            window_radius: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden == 0 || self.rank == 0 {
            return Err(Error::Config("input_dim, hidden and rank must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if self.confidence == ConfidenceKind::MaxClusterDifference && self.num_classes != 2 {
            return Err(Error::Config(
                "max cluster difference confidence requires exactly two classes".into(),
            ));
        }
        if self.task == Task::SequenceTagging && self.emb_dim == 0 {
            return Err(Error::Config("emb_dim must be positive".into()));
        }
        Ok(())
    }
}

/// Every trainable tensor. Also used, zero-initialized, as a gradient accumulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub encoder: Encoder,
    pub experts: Vec<Expert>,
    /// Metric factors `U` (`hidden × rank`); empty for single-classifier models,
    /// one entry when the metric is shared.
    pub metrics: Vec<DenseMatrix>,
}

impl Parameters for ModelParams {
    fn tensors(&self) -> Vec<&DenseMatrix> {
        let mut v = self.encoder.tensors();
        for e in &self.experts {
            v.extend(e.tensors());
        }
        v.extend(self.metrics.iter());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut DenseMatrix> {
        let mut v = self.encoder.tensors_mut();
        for e in &mut self.experts {
            v.extend(e.tensors_mut());
        }
        v.extend(self.metrics.iter_mut());
        v
    }

    fn zeros_like(&self) -> Self {
        Self {
            encoder: self.encoder.zeros_like(),
            experts: self.experts.iter().map(Parameters::zeros_like).collect(),
            metrics: self
                .metrics
                .iter()
                .map(|m| DenseMatrix::zeros(m.rows(), m.cols()))
                .collect(),
        }
    }
}

impl ModelParams {
    /// Tensor names in [`Parameters::tensors`] order.
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names: Vec<String> = match &self.encoder {
            Encoder::Mlp(_) => vec!["encoder.w1".into(), "encoder.b1".into()],
            Encoder::Token(_) => vec!["encoder.embedding".into(), "encoder.w1".into(), "encoder.b1".into()],
        };
        for (i, e) in self.experts.iter().enumerate() {
            names.push(format!("expert.{i}.w"));
            if e.bias.is_some() {
                names.push(format!("expert.{i}.bias"));
            }
        }
        for i in 0..self.metrics.len() {
            names.push(format!("metric.{i}.u"));
        }
        names
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
    /// One name per expert.
    pub source_names: Vec<String>,
    pub label_set: Vec<String>,
    pub vocab: Option<Vocabulary>,
    /// Full-domain statistics per expert, filled after training.
    pub source_stats: Vec<DomainStats>,
}

impl Model {
    /// Randomly initialized model with one expert per source name. Metric
    /// factors are created when `with_metric` is set and there are at least
    /// two experts.
    pub fn new<R: Rng + ?Sized>(
        config: ModelConfig,
        source_names: Vec<String>,
        label_set: Vec<String>,
        vocab: Option<Vocabulary>,
        with_metric: bool,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if source_names.is_empty() {
            return Err(Error::invalid("a model needs at least one expert"));
        }
        if label_set.len() != config.num_classes {
            return Err(Error::invalid("label set size differs from num_classes"));
        }
        let encoder = match config.task {
            Task::Classification => Encoder::Mlp(MlpEncoder::new(config.input_dim, config.hidden, rng)?),
            Task::SequenceTagging => Encoder::Token(TokenEncoder::new(
                config.input_dim,
                config.emb_dim,
                config.window_radius,
                config.hidden,
                rng,
            )?),
        };
        let experts = source_names
            .iter()
            .map(|_| Expert::new(config.num_classes, config.hidden, config.classifier_bias, rng))
            .collect::<Result<Vec<_>>>()?;
        let metric_count = match (with_metric && source_names.len() >= 2, config.shared_metric) {
            (false, _) => 0,
            (true, true) => 1,
            (true, false) => source_names.len(),
        };
        let std = 0.1 / (config.hidden as f64).sqrt();
        let metrics = (0..metric_count)
            .map(|_| DenseMatrix::random_normal(config.hidden, config.rank, std, rng))
            .collect();
        Ok(Self {
            config,
            params: ModelParams {
                encoder,
                experts,
                metrics,
            },
            source_names,
            label_set,
            vocab,
            source_stats: Vec::new(),
        })
    }

    pub fn num_experts(&self) -> usize {
        self.params.experts.len()
    }

    /// Whether predictions are mixed through the learned metric.
    pub fn is_mixture(&self) -> bool {
        !self.params.metrics.is_empty()
    }

    /// Metric factor used for source `l`.
    pub fn metric(&self, l: usize) -> &DenseMatrix {
        if self.config.shared_metric {
            &self.params.metrics[0]
        } else {
            &self.params.metrics[l]
        }
    }

    pub(crate) fn metric_index(&self, l: usize) -> usize {
        if self.config.shared_metric {
            0
        } else {
            l
        }
    }

    /// Encodes every unit of a dataset; returns the encodings and, when the
    /// dataset is labeled, the per-unit labels.
    pub fn encode_dataset(&self, dataset: &DomainDataset) -> Result<(DenseMatrix, Option<Vec<usize>>)> {
        const CHUNK: usize = 256;
        let mut parts = Vec::new();
        let mut labels = dataset.is_labeled().then(Vec::new);
        for chunk in dataset.examples.chunks(CHUNK) {
            let refs: Vec<&Example> = chunk.iter().collect();
            let (h, _) = self.params.encoder.forward(&refs)?;
            parts.push(h);
            if let Some(labels) = labels.as_mut() {
                for ex in chunk {
                    labels.extend(ex.unit_labels().expect("labeled dataset"));
                }
            }
        }
        let refs: Vec<&DenseMatrix> = parts.iter().collect();
        let h = if refs.is_empty() {
            DenseMatrix::zeros(0, self.config.hidden)
        } else {
            DenseMatrix::vstack(&refs)?
        };
        Ok((h, labels))
    }

    /// Statistics of one labeled domain under the current encoder.
    pub fn domain_stats(&self, dataset: &DomainDataset) -> Result<DomainStats> {
        let (h, labels) = self.encode_dataset(dataset)?;
        let labels = labels.as_deref().map(|l| (l, self.config.num_classes));
        compute_domain_stats(&h, labels)
    }

    /// Recomputes full-domain statistics, one dataset per expert.
    pub fn refresh_source_stats(&mut self, sources: &[&DomainDataset]) -> Result<()> {
        if sources.len() != self.num_experts() {
            return Err(Error::invalid(format!(
                "{} datasets for {} experts",
                sources.len(),
                self.num_experts()
            )));
        }
        self.source_stats = sources.iter().map(|d| self.domain_stats(d)).collect::<Result<_>>()?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>, extra: &BTreeMap<String, String>) -> Result<()> {
        let path = path.as_ref();
        let ckpt = Checkpoint::from_model(self, extra);
        let text = serde_json::to_string_pretty(&ckpt)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, BTreeMap<String, String>)> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        ckpt.into_model()
    }
}

pub const CHECKPOINT_FORMAT: &str = "mdmoe-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

/// On-disk model: a JSON object with named tensors. See the README for the layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub expert_count: usize,
    pub metric_count: usize,
    pub source_names: Vec<String>,
    pub label_set: Vec<String>,
    pub vocab: Option<Vec<String>>,
    pub source_stats: Vec<DomainStats>,
    pub tensors: Vec<NamedTensor>,
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, extra: &BTreeMap<String, String>) -> Self {
        let tensors = model
            .params
            .tensor_names()
            .into_iter()
            .zip(model.params.tensors())
            .map(|(name, t)| NamedTensor {
                name,
                rows: t.rows(),
                cols: t.cols(),
                data: t.as_slice().to_vec(),
            })
            .collect();
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: model.config.clone(),
            expert_count: model.num_experts(),
            metric_count: model.params.metrics.len(),
            source_names: model.source_names.clone(),
            label_set: model.label_set.clone(),
            vocab: model.vocab.as_ref().map(|v| v.tokens().to_vec()),
            source_stats: model.source_stats.clone(),
            tensors,
            extra: extra.clone(),
        }
    }

    pub fn into_model(self) -> Result<(Model, BTreeMap<String, String>)> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::invalid(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        if self.source_names.len() != self.expert_count {
            return Err(Error::invalid("checkpoint expert count mismatch"));
        }
        // Rebuild shapes from the config, then overwrite every tensor by name.
        let mut rng = crate::numerics::seeded_rng(0, 0);
        let mut config = self.config.clone();
        let shared = config.shared_metric;
        config.shared_metric = shared && self.metric_count == 1;
        let mut model = Model::new(
            config,
            self.source_names,
            self.label_set,
            self.vocab.map(Vocabulary::from_tokens),
            self.metric_count > 0,
            &mut rng,
        )?;
        if model.params.metrics.len() != self.metric_count {
            return Err(Error::invalid("checkpoint metric count mismatch"));
        }
        let mut by_name: BTreeMap<String, NamedTensor> =
            self.tensors.into_iter().map(|t| (t.name.clone(), t)).collect();
        let names = model.params.tensor_names();
        for (name, slot) in names.iter().zip(model.params.tensors_mut()) {
            let t = by_name
                .remove(name)
                .ok_or_else(|| Error::invalid(format!("checkpoint lacks tensor {name}")))?;
            if (t.rows, t.cols) != slot.shape() {
                return Err(Error::invalid(format!(
                    "tensor {name} is {}x{}, expected {}x{}",
                    t.rows,
                    t.cols,
                    slot.rows(),
                    slot.cols()
                )));
            }
            *slot = DenseMatrix::new(t.rows, t.cols, t.data)?;
        }
        if let Some(name) = by_name.keys().next() {
            return Err(Error::invalid(format!("unexpected tensor {name} in checkpoint")));
        }
        model.source_stats = self.source_stats;
        Ok((model, self.extra))
    }
}
