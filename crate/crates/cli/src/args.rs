use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{ArgAction, Args, CommandFactory, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use mdmoe::{ConfidenceKind, Mode, Task, TrainConfig};

use crate::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "mdmoe",
    version,
    about = "Multi-source domain adaptation with a mixture of experts"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate shifted source domains, optional outlier domains and a target.
    #[command(args_override_self = true)]
    Synth(SynthArgs),
    /// Train a mixture or a baseline and write checkpoint, log and metrics.
    #[command(args_override_self = true)]
    Train(TrainArgs),
    /// Score a checkpoint on a dataset, optionally exporting mixture weights.
    #[command(args_override_self = true)]
    Eval(EvalArgs),
    /// Select hyper-parameters by leave-one-source-out cross-validation.
    #[command(args_override_self = true)]
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeArg {
    Moe,
    BestSs,
    UniMs,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Moe => Mode::Moe,
            ModeArg::BestSs => Mode::BestSs,
            ModeArg::UniMs => Mode::UniMs,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskArg {
    Classification,
    Tagging,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Classification => Task::Classification,
            TaskArg::Tagging => Task::SequenceTagging,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConfidenceArg {
    Mcd,
    Negdist,
}

impl From<ConfidenceArg> for ConfidenceKind {
    fn from(c: ConfidenceArg) -> Self {
        match c {
            ConfidenceArg::Mcd => ConfidenceKind::MaxClusterDifference,
            ConfidenceArg::Negdist => ConfidenceKind::NegativeDistance,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SynthArgs {
    /// Regular source domains.
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
    #[arg(long, default_value_t = 10)]
    pub dim: usize,
    /// Examples per regular source domain.
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    /// Target examples; defaults to `--n`.
    #[arg(long)]
    pub target_n: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    pub shift: f64,
    /// Extra domains with resampled labels.
    #[arg(long, default_value_t = 0)]
    pub outliers: usize,
    /// Fraction of outlier labels replaced by random draws.
    #[arg(long, default_value_t = 1.0)]
    pub outlier_noise: f64,
    /// Outlier size as a multiple of `--n`.
    #[arg(long, default_value_t = 1.0)]
    pub outlier_scale: f64,
    #[arg(long, default_value_t = 3.0)]
    pub class_sep: f64,
    #[arg(long, default_value_t = 1.0)]
    pub noise_std: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// `key=value` lines applied before explicit flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DataArgs {
    #[arg(long, value_enum, default_value_t = TaskArg::Classification)]
    pub task: TaskArg,
    /// Comma-separated labeled source files.
    #[arg(long, value_delimiter = ',', required = true)]
    pub sources: Vec<PathBuf>,
    /// Target file; its labels, if any, are used only for scoring.
    #[arg(long)]
    pub target: Option<PathBuf>,
    /// Labeled early-stopping set; otherwise each source is split.
    #[arg(long)]
    pub validation: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct HyperArgs {
    #[arg(long, value_enum, default_value_t = ModeArg::Moe)]
    pub mode: ModeArg,
    /// Add the MMD alignment term.
    #[arg(long, action = ArgAction::Set, num_args = 0..=1, default_value_t = false, default_missing_value = "true")]
    pub adversarial: bool,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.5)]
    pub lambda: f64,
    #[arg(long, default_value_t = 1.0)]
    pub gamma: f64,
    #[arg(long, default_value_t = 0.01)]
    pub eta: f64,
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    /// Metric rank; `min(hidden, 64)` when omitted.
    #[arg(long)]
    pub rank: Option<usize>,
    /// 1e-4 for sparse vectors and 1e-3 otherwise when omitted.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, default_value_t = 1e-4)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 100)]
    pub max_epochs: usize,
    #[arg(long, default_value_t = 10)]
    pub patience: usize,
    #[arg(long, default_value_t = 0.2)]
    pub valid_fraction: f64,
    /// Confidence function; `mcd` for binary vectors, `negdist` otherwise.
    #[arg(long, value_enum)]
    pub confidence: Option<ConfidenceArg>,
    #[arg(long, action = ArgAction::Set, num_args = 0..=1, default_value_t = false, default_missing_value = "true")]
    pub classifier_bias: bool,
    #[arg(long, action = ArgAction::Set, num_args = 0..=1, default_value_t = false, default_missing_value = "true")]
    pub shared_metric: bool,
    #[arg(long, action = ArgAction::Set, num_args = 0..=1, default_value_t = false, default_missing_value = "true")]
    pub stop_grad_means: bool,
    #[arg(long, default_value_t = 32)]
    pub emb_dim: usize,
    #[arg(long, default_value_t = 2)]
    pub window: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl HyperArgs {
    pub fn to_config(&self) -> TrainConfig {
        TrainConfig {
            mode: self.mode.into(),
            adversarial: self.adversarial,
            batch_size: self.batch_size,
            lambda: self.lambda,
            gamma: self.gamma,
            eta: self.eta,
            hidden: self.hidden,
            rank: self.rank,
            learning_rate: self.lr,
            weight_decay: self.weight_decay,
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed: self.seed,
            valid_fraction: self.valid_fraction,
            confidence: self.confidence.map(Into::into),
            classifier_bias: self.classifier_bias,
            shared_metric: self.shared_metric,
            stop_grad_means: self.stop_grad_means,
            emb_dim: self.emb_dim,
            window_radius: self.window,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub hyper: HyperArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Write per-unit target mixture weights to this file inside `--out`.
    #[arg(long)]
    pub export_alpha: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub target: PathBuf,
    /// Expected task; must match the checkpoint.
    #[arg(long, value_enum)]
    pub task: Option<TaskArg>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Write per-unit mixture weights to this file inside `--out`.
    #[arg(long)]
    pub export_alpha: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SweepArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub hyper: HyperArgs,
    /// Comma-separated values; the single `--lambda` value when omitted.
    #[arg(long)]
    pub grid_lambda: Option<String>,
    #[arg(long)]
    pub grid_eta: Option<String>,
    #[arg(long)]
    pub grid_rank: Option<String>,
    #[arg(long)]
    pub grid_lr: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Parses a comma-separated list; an empty string is an empty list.
pub fn parse_list<T: std::str::FromStr>(name: &str, raw: &str) -> Result<Vec<T>, CliError> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|_| CliError::usage(format!("--{name}: cannot parse {s:?}")))
        })
        .collect()
}

fn config_path(args: &[OsString]) -> Result<Option<PathBuf>, CliError> {
    for (i, a) in args.iter().enumerate() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return match args.get(i + 1) {
                Some(p) => Ok(Some(PathBuf::from(p))),
                None => Err(CliError::usage("--config needs a file")),
            };
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Ok(Some(PathBuf::from(p)));
        }
    }
    Ok(None)
}

/// Turns `key=value` lines into `--key=value` arguments for `subcommand`.
pub fn config_args(path: &Path, subcommand: &str) -> Result<Vec<OsString>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::data(format!("cannot read config {}: {e}", path.display())))?;
    let cmd = Cli::command();
    let sub = cmd
        .find_subcommand(subcommand)
        .ok_or_else(|| CliError::usage(format!("unknown command {subcommand:?}")))?;
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("{}:{}: expected key=value", path.display(), n + 1)))?;
        let key = key.trim().replace('_', "-");
        if key == "config" || !sub.get_arguments().any(|a| a.get_long() == Some(key.as_str())) {
            return Err(CliError::usage(format!(
                "{}:{}: unknown key {key:?} for {subcommand}",
                path.display(),
                n + 1
            )));
        }
        out.push(OsString::from(format!("--{key}={}", value.trim())));
    }
    Ok(out)
}

/// Inserts config-file arguments ahead of the explicit ones so explicit
/// flags win.
pub fn expand_config(args: Vec<OsString>) -> Result<Vec<OsString>, CliError> {
    let Some(path) = config_path(&args)? else {
        return Ok(args);
    };
    let Some(sub) = args.get(1).map(|s| s.to_string_lossy().into_owned()) else {
        return Ok(args);
    };
    let injected = config_args(&path, &sub)?;
    let mut out = args[..2].to_vec();
    out.extend(injected);
    out.extend_from_slice(&args[2..]);
    Ok(out)
}
