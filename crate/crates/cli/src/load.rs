//! Dataset loading for the commands.

use std::path::{Path, PathBuf};

use mdmoe::data::{harmonize, load_sparse, TaggedCorpus};
use mdmoe::{DomainDataset, Model, Task, Vocabulary};

use crate::CliError;

/// Guesses the file format from its first data lines: `idx:val` fields mean
/// sparse vectors, a plain second column means `token tag`.
pub fn sniff_task(path: &Path) -> Result<Option<Task>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    for line in text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .take(50)
    {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields[1..].iter().any(|f| f.contains(':')) {
            return Ok(Some(Task::Classification));
        }
        if fields.len() == 2 {
            return Ok(Some(Task::SequenceTagging));
        }
    }
    Ok(None)
}

pub fn check_format(path: &Path, task: Task) -> Result<(), CliError> {
    match sniff_task(path)? {
        Some(found) if found != task => Err(CliError::usage(format!(
            "{} looks like {found} data, expected {task}",
            path.display()
        ))),
        _ => Ok(()),
    }
}

pub struct Loaded {
    pub sources: Vec<DomainDataset>,
    pub target: Option<DomainDataset>,
    pub validation: Option<DomainDataset>,
    pub vocab: Option<Vocabulary>,
}

/// Loads sources, target and validation onto one shared feature space and
/// label set. Malformed sparse files surface as parse errors.
pub fn load_all(
    task: Task,
    sources: &[PathBuf],
    target: Option<&Path>,
    validation: Option<&Path>,
) -> Result<Loaded, CliError> {
    let all: Vec<&Path> = sources
        .iter()
        .map(PathBuf::as_path)
        .chain(target)
        .chain(validation)
        .collect();
    if task == Task::SequenceTagging {
        for p in &all {
            check_format(p, task)?;
        }
    }
    let k = sources.len();
    let (mut datasets, vocab) = match task {
        Task::Classification => {
            let mut ds = all
                .iter()
                .map(|p| load_sparse(p, None))
                .collect::<Result<Vec<_>, _>>()?;
            harmonize(&mut ds)?;
            (ds, None)
        }
        Task::SequenceTagging => {
            let corpora = all.iter().map(TaggedCorpus::read).collect::<Result<Vec<_>, _>>()?;
            let vocab = Vocabulary::build(corpora.iter());
            let mut tags: Vec<String> = Vec::new();
            for c in &corpora[..k] {
                for t in c.tag_set() {
                    if !tags.contains(&t) {
                        tags.push(t);
                    }
                }
            }
            let ds = corpora
                .iter()
                .map(|c| c.index(&vocab, &tags))
                .collect::<Result<Vec<_>, _>>()?;
            (ds, Some(vocab))
        }
    };
    for d in &datasets {
        log::info!(
            "{}: {} examples, dim {}, {} labels",
            d.name,
            d.len(),
            d.input_dim,
            d.num_classes()
        );
    }
    let validation = validation.map(|_| datasets.pop().expect("validation loaded"));
    let target = target.map(|_| datasets.pop().expect("target loaded"));
    Ok(Loaded {
        sources: datasets,
        target,
        validation,
        vocab,
    })
}

/// Loads a dataset against a trained model's input space and labels.
pub fn load_for_model(model: &Model, path: &Path) -> Result<DomainDataset, CliError> {
    check_format(path, model.config.task)?;
    match model.config.task {
        Task::Classification => {
            let mut ds = load_sparse(path, Some(model.config.input_dim))?;
            if ds.num_classes() > model.config.num_classes {
                return Err(CliError::usage(format!(
                    "{} has {} classes, the checkpoint {}",
                    path.display(),
                    ds.num_classes(),
                    model.config.num_classes
                )));
            }
            ds.label_set = model.label_set.clone();
            ds.validate()?;
            Ok(ds)
        }
        Task::SequenceTagging => {
            let vocab = model
                .vocab
                .as_ref()
                .ok_or_else(|| CliError::data("tagging checkpoint without a vocabulary"))?;
            Ok(TaggedCorpus::read(path)?.index(vocab, &model.label_set)?)
        }
    }
}
