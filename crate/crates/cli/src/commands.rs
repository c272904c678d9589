use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Component, Path, PathBuf};

use serde_json::json;

use mdmoe::data::{synthesize, write_sparse};
use mdmoe::trainer::{cross_validate, evaluate, GridPoint};
use mdmoe::{DomainDataset, Evaluation, Mode, Model, RunMetrics, SynthSpec, Task, TrainConfig, TrainInputs};

use crate::args::{parse_list, EvalArgs, SweepArgs, SynthArgs, TrainArgs};
use crate::load::{load_all, load_for_model, sniff_task};
use crate::manifest::RunManifest;
use crate::CliError;

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::data(format!("cannot create {}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    std::fs::write(path, text).map_err(|e| CliError::data(format!("cannot write {}: {e}", path.display())))
}

fn to_value<T: serde::Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).unwrap_or(serde_json::Value::Null)
}

/// Resolves a relative output file under `out`; absolute paths and `..`
/// are rejected.
fn inside(out: &Path, rel: &Path) -> Result<PathBuf, CliError> {
    if rel.is_absolute()
        || rel
            .components()
            .any(|c| !matches!(c, Component::Normal(_) | Component::CurDir))
    {
        return Err(CliError::usage(format!(
            "{} must be a relative path inside --out",
            rel.display()
        )));
    }
    Ok(out.join(rel))
}

pub fn synth(a: &SynthArgs) -> Result<(), CliError> {
    let spec = SynthSpec {
        k: a.k,
        classes: a.classes,
        dim: a.dim,
        per_domain_n: a.n,
        target_n: a.target_n.unwrap_or(a.n),
        domain_shift: a.shift,
        outlier_domains: a.outliers,
        outlier_noise: a.outlier_noise,
        outlier_scale: a.outlier_scale,
        class_sep: a.class_sep,
        noise_std: a.noise_std,
        seed: a.seed,
        ..SynthSpec::default()
    };
    spec.validate()?;
    let data = synthesize(&spec)?;
    create_dir(&a.out)?;
    let mut manifest = RunManifest::new("synth", a.seed, json!({ "args": to_value(a), "spec": to_value(&spec) }));
    let mut regular = 0;
    let mut outlier = 0;
    for (i, ds) in data.sources.iter().enumerate() {
        let (name, role) = if data.is_outlier(i) {
            outlier += 1;
            (format!("outlier_{}.svm", outlier - 1), "outlier-source")
        } else {
            regular += 1;
            (format!("source_{}.svm", regular - 1), "source")
        };
        write_sparse(ds, a.out.join(&name))?;
        manifest.artifact(name, role);
    }
    write_sparse(&data.target, a.out.join("target.svm"))?;
    manifest.artifact("target.svm", "target");
    manifest.write(&a.out.join("manifest.json"))?;
    println!(
        "wrote {} sources ({} outliers) and a target of {} to {}",
        data.sources.len(),
        data.outlier_count,
        data.target.len(),
        a.out.display()
    );
    Ok(())
}

fn train_log_csv(history: &[mdmoe::trainer::EpochLog]) -> String {
    let mut out = String::from("epoch,moe,mtl,adv,entropy,total,valid_accuracy,learning_rate\n");
    for h in history {
        let l = &h.losses;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            h.epoch, l.moe, l.mtl, l.adv, l.entropy, l.total, h.valid_accuracy, h.learning_rate
        );
    }
    out
}

fn alpha_csv(model: &Model, ds: &DomainDataset, ev: &Evaluation) -> String {
    let mut out = String::from("example,unit,true_label,predicted_label");
    for name in &model.source_names {
        let _ = write!(out, ",alpha_{name}");
    }
    out.push('\n');
    let label = |i: usize| ds.label_set.get(i).cloned().unwrap_or_else(|| i.to_string());
    for r in &ev.records {
        let _ = write!(
            out,
            "{},{},{},{}",
            r.example,
            r.unit,
            r.label.map_or_else(|| "NA".to_string(), label),
            label(r.predicted)
        );
        for a in &r.alpha {
            let _ = write!(out, ",{a}");
        }
        out.push('\n');
    }
    out
}

fn checkpoint_extra(cfg: &TrainConfig, selected: Option<usize>) -> BTreeMap<String, String> {
    let mut extra = BTreeMap::new();
    extra.insert("mode".into(), cfg.mode.to_string());
    extra.insert("adversarial".into(), cfg.adversarial.to_string());
    extra.insert("seed".into(), cfg.seed.to_string());
    if let Some(s) = selected {
        extra.insert("selected_source".into(), s.to_string());
    }
    extra
}

pub fn train(a: &TrainArgs) -> Result<(), CliError> {
    let cfg = a.hyper.to_config();
    cfg.validate()?;
    if cfg.mode == Mode::Moe && a.data.sources.len() < 2 {
        return Err(CliError::usage("--mode moe needs at least two sources"));
    }
    if cfg.adversarial && a.data.target.is_none() {
        return Err(CliError::usage("--adversarial needs --target"));
    }
    if a.export_alpha.is_some() && a.data.target.is_none() {
        return Err(CliError::usage("--export-alpha needs --target"));
    }
    let alpha_path = a.export_alpha.as_deref().map(|p| inside(&a.out, p)).transpose()?;
    let task: Task = a.data.task.into();
    let loaded = load_all(
        task,
        &a.data.sources,
        a.data.target.as_deref(),
        a.data.validation.as_deref(),
    )?;

    create_dir(&a.out)?;
    let mut manifest = RunManifest::new(
        "train",
        cfg.seed,
        json!({ "args": to_value(a), "train": to_value(&cfg) }),
    );
    for p in a.data.sources.iter().chain(&a.data.target).chain(&a.data.validation) {
        manifest.fingerprint(p)?;
    }
    manifest.artifact("checkpoint.json", "checkpoint");
    manifest.artifact("train_log.csv", "log");
    manifest.artifact("metrics.txt", "metrics");
    if cfg.mode == Mode::BestSs {
        manifest.artifact("candidates.csv", "candidates");
    }
    if let Some(p) = &a.export_alpha {
        manifest.artifact(p.display().to_string(), "alpha");
    }
    manifest.write(&a.out.join("manifest.json"))?;

    let inputs = TrainInputs {
        sources: &loaded.sources,
        target: loaded.target.as_ref(),
        validation: loaded.validation.as_ref(),
        vocab: loaded.vocab.as_ref(),
    };
    let report = mdmoe::trainer::train(&inputs, &cfg)?;
    report.model.save(
        a.out.join("checkpoint.json"),
        &checkpoint_extra(&cfg, report.selected_source),
    )?;
    write_text(&a.out.join("train_log.csv"), &train_log_csv(&report.history))?;
    if cfg.mode == Mode::BestSs {
        let mut csv = String::from("index,source,best_valid,target_accuracy,selected\n");
        for (i, c) in report.candidates.iter().enumerate() {
            let _ = writeln!(
                csv,
                "{i},{},{},{},{}",
                c.source,
                c.best_valid,
                c.target_accuracy.map_or_else(|| "NA".to_string(), |x| x.to_string()),
                report.selected_source == Some(i)
            );
        }
        write_text(&a.out.join("candidates.csv"), &csv)?;
    }

    let evaluation = loaded
        .target
        .as_ref()
        .map(|t| evaluate(&report.model, t).map(|e| (t, e)))
        .transpose()?;
    let metrics = RunMetrics::new(&report, &cfg, evaluation.as_ref().map(|(t, e)| (*t, e)));
    metrics.write(a.out.join("metrics.txt"))?;
    if let (Some(path), Some((t, e))) = (&alpha_path, &evaluation) {
        write_text(path, &alpha_csv(&report.model, t, e))?;
    }
    println!("best_epoch={} best_valid={:.4}", report.best_epoch, report.best_valid);
    if let Some(acc) = metrics.accuracy {
        println!("accuracy={acc}");
    }
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<(), CliError> {
    let (model, _) = Model::load(&a.checkpoint)?;
    let task = model.config.task;
    if let Some(t) = a.task {
        let want: Task = t.into();
        if want != task {
            return Err(CliError::usage(format!("--task {want} but the checkpoint is {task}")));
        }
    }
    if let Some(found) = sniff_task(&a.target)? {
        if found != task {
            return Err(CliError::usage(format!(
                "{} looks like {found} data, the checkpoint is {task}",
                a.target.display()
            )));
        }
    }
    let alpha_path = a.export_alpha.as_deref().map(|p| inside(&a.out, p)).transpose()?;
    let ds = load_for_model(&model, &a.target)?;
    let ev = evaluate(&model, &ds)?;
    match ev.accuracy {
        Some(acc) => println!("accuracy={acc}"),
        None => println!("accuracy=NA"),
    }
    println!("units={}", ev.total);
    for (name, m) in model.source_names.iter().zip(&ev.mean_alpha) {
        println!("alpha.{name}={m}");
    }
    if let Some(path) = alpha_path {
        create_dir(&a.out)?;
        write_text(&path, &alpha_csv(&model, &ds, &ev))?;
    }
    Ok(())
}

fn grid_values<T: std::str::FromStr + Copy>(name: &str, raw: Option<&str>, default: T) -> Result<Vec<T>, CliError> {
    match raw {
        Some(r) => parse_list(name, r),
        None => Ok(vec![default]),
    }
}

pub fn sweep(a: &SweepArgs) -> Result<(), CliError> {
    let cfg = a.hyper.to_config();
    cfg.validate()?;
    if a.data.sources.len() < 2 {
        return Err(CliError::usage("sweep needs at least two sources"));
    }
    let task: Task = a.data.task.into();
    let loaded = load_all(task, &a.data.sources, None, None)?;
    let refs: Vec<&DomainDataset> = loaded.sources.iter().collect();
    let default_rank = cfg.model_config(&refs)?.rank;
    let default_lr = cfg.resolve_learning_rate(&refs);

    let lambdas = grid_values("grid-lambda", a.grid_lambda.as_deref(), cfg.lambda)?;
    let etas = grid_values("grid-eta", a.grid_eta.as_deref(), cfg.eta)?;
    let ranks = grid_values("grid-rank", a.grid_rank.as_deref(), default_rank)?;
    let lrs = grid_values("grid-lr", a.grid_lr.as_deref(), default_lr)?;
    let mut grid = Vec::new();
    for &lambda in &lambdas {
        for &eta in &etas {
            for &rank in &ranks {
                for &learning_rate in &lrs {
                    grid.push(GridPoint {
                        lambda,
                        eta,
                        rank,
                        learning_rate,
                    });
                }
            }
        }
    }
    if grid.is_empty() {
        return Err(CliError::usage("the hyper-parameter grid is empty"));
    }

    create_dir(&a.out)?;
    let mut manifest = RunManifest::new(
        "sweep",
        cfg.seed,
        json!({ "args": to_value(a), "train": to_value(&cfg), "grid": to_value(&grid) }),
    );
    for p in &a.data.sources {
        manifest.fingerprint(p)?;
    }
    manifest.artifact("sweep.csv", "report");
    manifest.artifact("selected.conf", "config");
    manifest.write(&a.out.join("manifest.json"))?;

    let cv = cross_validate(&loaded.sources, &cfg, &grid)?;
    let mut csv = String::from("index,lambda,eta,rank,learning_rate,mean_accuracy,selected\n");
    for (i, (p, s)) in grid.iter().zip(&cv.scores).enumerate() {
        let _ = writeln!(
            csv,
            "{i},{},{},{},{},{s},{}",
            p.lambda,
            p.eta,
            p.rank,
            p.learning_rate,
            i == cv.selected
        );
    }
    write_text(&a.out.join("sweep.csv"), &csv)?;

    let best = grid[cv.selected];
    let sources: Vec<String> = a.data.sources.iter().map(|p| p.display().to_string()).collect();
    let h = &a.hyper;
    let mut conf = format!(
        "task={}\nsources={}\nmode={}\nadversarial={}\n",
        to_value(&a.data.task).as_str().unwrap_or("classification"),
        sources.join(","),
        cfg.mode,
        h.adversarial
    );
    let _ = write!(
        conf,
        "lambda={}\neta={}\nrank={}\nlr={}\ngamma={}\nhidden={}\nbatch_size={}\nweight_decay={}\nmax_epochs={}\npatience={}\nvalid_fraction={}\nseed={}\n",
        best.lambda,
        best.eta,
        best.rank,
        best.learning_rate,
        h.gamma,
        h.hidden,
        h.batch_size,
        h.weight_decay,
        h.max_epochs,
        h.patience,
        h.valid_fraction,
        h.seed
    );
    write_text(&a.out.join("selected.conf"), &conf)?;
    println!(
        "selected {} lambda={} eta={} rank={} lr={} mean_accuracy={}",
        cv.selected, best.lambda, best.eta, best.rank, best.learning_rate, cv.scores[cv.selected]
    );
    Ok(())
}
