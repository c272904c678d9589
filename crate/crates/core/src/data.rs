//! Datasets: in-memory domain representation, the sparse-vector and
//! token/tag file formats, seeded train/held-out splits and the synthetic
//! multi-domain generator.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, gaussian, permutation, seeded_rng};

/// What a dataset's examples look like and how they are scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    /// One dense feature vector and one label per example.
    Classification,
    /// One token sequence and one tag per token.
    SequenceTagging,
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Classification => "classification",
            Task::SequenceTagging => "sequence-tagging",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Example {
    Vector {
        features: Vec<f64>,
        label: Option<usize>,
    },
    Sequence {
        tokens: Vec<usize>,
        tags: Option<Vec<usize>>,
    },
}

impl Example {
    pub fn is_labeled(&self) -> bool {
        match self {
            Example::Vector { label, .. } => label.is_some(),
            Example::Sequence { tags, .. } => tags.is_some(),
        }
    }

    /// Number of scored units: 1 for vectors, the token count for sequences.
    pub fn unit_count(&self) -> usize {
        match self {
            Example::Vector { .. } => 1,
            Example::Sequence { tokens, .. } => tokens.len(),
        }
    }

    /// Per-unit labels, if any.
    pub fn unit_labels(&self) -> Option<Vec<usize>> {
        match self {
            Example::Vector { label, .. } => label.map(|l| vec![l]),
            Example::Sequence { tags, .. } => tags.clone(),
        }
    }
}

/// Examples from one domain, either all labeled or all unlabeled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainDataset {
    pub name: String,
    pub task: Task,
    pub label_set: Vec<String>,
    /// Feature dimension for vectors, vocabulary size for sequences.
    pub input_dim: usize,
    pub examples: Vec<Example>,
}

impl DomainDataset {
    pub fn new(
        name: impl Into<String>,
        task: Task,
        label_set: Vec<String>,
        input_dim: usize,
        examples: Vec<Example>,
    ) -> Result<Self> {
        let ds = Self {
            name: name.into(),
            task,
            label_set,
            input_dim,
            examples,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.label_set.len() < 2 {
            return Err(Error::invalid(format!(
                "domain {}: need at least two labels",
                self.name
            )));
        }
        if self.input_dim == 0 {
            return Err(Error::invalid(format!("domain {}: zero input dimension", self.name)));
        }
        let labeled = self.examples.first().map(Example::is_labeled);
        let classes = self.label_set.len();
        for (i, ex) in self.examples.iter().enumerate() {
            if Some(ex.is_labeled()) != labeled {
                return Err(Error::invalid(format!(
                    "domain {}: labeled and unlabeled examples mixed (example {i})",
                    self.name
                )));
            }
            match (ex, self.task) {
                (Example::Vector { features, label }, Task::Classification) => {
                    if features.len() != self.input_dim {
                        return Err(Error::invalid(format!(
                            "domain {}: example {i} has {} features, expected {}",
                            self.name,
                            features.len(),
                            self.input_dim
                        )));
                    }
                    if label.is_some_and(|l| l >= classes) {
                        return Err(Error::invalid(format!(
                            "domain {}: example {i} label out of range",
                            self.name
                        )));
                    }
                }
                (Example::Sequence { tokens, tags }, Task::SequenceTagging) => {
                    if tokens.iter().any(|&t| t >= self.input_dim) {
                        return Err(Error::invalid(format!(
                            "domain {}: example {i} token id beyond vocabulary",
                            self.name
                        )));
                    }
                    if let Some(tags) = tags {
                        if tags.len() != tokens.len() || tags.iter().any(|&t| t >= classes) {
                            return Err(Error::invalid(format!(
                                "domain {}: example {i} has invalid tags",
                                self.name
                            )));
                        }
                    }
                }
                _ => {
                    return Err(Error::invalid(format!(
                        "domain {}: example {i} does not match task {}",
                        self.name, self.task
                    )))
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.label_set.len()
    }

    pub fn is_labeled(&self) -> bool {
        self.examples.first().is_some_and(Example::is_labeled)
    }

    pub fn unit_count(&self) -> usize {
        self.examples.iter().map(Example::unit_count).sum()
    }

    /// Copy with the labels removed.
    pub fn unlabeled(&self) -> Self {
        let examples = self
            .examples
            .iter()
            .map(|ex| match ex {
                Example::Vector { features, .. } => Example::Vector {
                    features: features.clone(),
                    label: None,
                },
                Example::Sequence { tokens, .. } => Example::Sequence {
                    tokens: tokens.clone(),
                    tags: None,
                },
            })
            .collect();
        Self {
            examples,
            ..self.clone()
        }
    }

    /// Subset by example index, in the given order.
    pub fn subset(&self, name: impl Into<String>, indices: &[usize]) -> Self {
        Self {
            name: name.into(),
            examples: indices.iter().map(|&i| self.examples[i].clone()).collect(),
            ..self.clone()
        }
    }

    /// Concatenates compatible datasets into one domain.
    pub fn concat(name: impl Into<String>, parts: &[&DomainDataset]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of zero datasets"))?;
        for p in parts {
            if p.task != first.task || p.input_dim != first.input_dim || p.label_set != first.label_set {
                return Err(Error::invalid(format!(
                    "cannot concatenate {} with {}: incompatible domains",
                    first.name, p.name
                )));
            }
        }
        DomainDataset::new(
            name,
            first.task,
            first.label_set.clone(),
            first.input_dim,
            parts.iter().flat_map(|p| p.examples.iter().cloned()).collect(),
        )
    }
}

/// Checks that a set of domains can share one model.
pub fn check_compatible(domains: &[&DomainDataset]) -> Result<()> {
    if let Some(first) = domains.first() {
        for d in &domains[1..] {
            if d.task != first.task || d.input_dim != first.input_dim || d.label_set != first.label_set {
                return Err(Error::invalid(format!(
                    "domains {} and {} disagree on task, input dimension or label set",
                    first.name, d.name
                )));
            }
        }
    }
    Ok(())
}

/// Brings independently loaded vector datasets onto one feature dimension
/// (zero padding) and one label set (the widest). Binary sets are renamed to
/// `0`, `1` when any dataset is multi-class.
pub fn harmonize(datasets: &mut [DomainDataset]) -> Result<()> {
    if datasets.iter().any(|d| d.task != Task::Classification) {
        return Err(Error::invalid("harmonize handles vector datasets only"));
    }
    let dim = datasets.iter().map(|d| d.input_dim).max().unwrap_or(0);
    let classes = datasets.iter().map(|d| d.num_classes()).max().unwrap_or(0);
    let label_set = if classes <= 2 {
        default_binary_labels()
    } else {
        (0..classes).map(|c| c.to_string()).collect()
    };
    for d in datasets.iter_mut() {
        if d.input_dim < dim {
            for ex in &mut d.examples {
                if let Example::Vector { features, .. } = ex {
                    features.resize(dim, 0.0);
                }
            }
            d.input_dim = dim;
        }
        d.label_set = label_set.clone();
    }
    Ok(())
}

fn default_binary_labels() -> Vec<String> {
    vec!["-1".into(), "+1".into()]
}

fn domain_name_of(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "domain".into())
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn parse_label(raw: &str) -> Option<Option<usize>> {
    match raw {
        "?" => Some(None),
        "-1" | "0" => Some(Some(0)),
        "+1" | "1" => Some(Some(1)),
        other => other.parse::<usize>().ok().map(Some),
    }
}

/// Loads `label idx:val …` lines (1-based ascending indices) as dense vectors.
///
/// `-1`/`+1` map to classes 0/1; other non-negative integers are class
/// indices; `?` marks an unlabeled example. Lines starting with `#` are
/// comments, except a `# dim=N` header which declares the dimension when
/// `dim` is `None`. Without either, the largest index seen is used.
pub fn load_sparse(path: impl AsRef<Path>, dim: Option<usize>) -> Result<DomainDataset> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let perr = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };

    let mut declared = dim;
    let mut rows: Vec<(usize, Vec<(usize, f64)>, Option<usize>)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let lineno = n + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if declared.is_none() {
                if let Some(v) = comment.trim().strip_prefix("dim=") {
                    declared = Some(
                        v.trim()
                            .parse()
                            .map_err(|_| perr(lineno, format!("bad dim header {v:?}")))?,
                    );
                }
            }
            continue;
        }
        let mut fields = line.split_whitespace();
        let label_raw = fields.next().expect("non-empty line");
        let label = parse_label(label_raw).ok_or_else(|| perr(lineno, format!("bad label {label_raw:?}")))?;
        let mut entries = Vec::new();
        let mut last = 0usize;
        for field in fields {
            let (i, v) = field
                .split_once(':')
                .ok_or_else(|| perr(lineno, format!("expected idx:val, got {field:?}")))?;
            let i: usize = i.parse().map_err(|_| perr(lineno, format!("bad index {i:?}")))?;
            let v: f64 = v.parse().map_err(|_| perr(lineno, format!("bad value {v:?}")))?;
            if i == 0 || i <= last {
                return Err(perr(lineno, format!("indices must be 1-based and ascending ({i})")));
            }
            if !v.is_finite() {
                return Err(perr(lineno, format!("non-finite value at index {i}")));
            }
            last = i;
            entries.push((i, v));
        }
        rows.push((lineno, entries, label));
    }
    if rows.is_empty() {
        return Err(perr(0, "no examples in file".into()));
    }

    let dim = match declared {
        Some(d) => d,
        None => rows
            .iter()
            .filter_map(|(_, e, _)| e.last().map(|(i, _)| *i))
            .max()
            .unwrap_or(0),
    };
    if dim == 0 {
        return Err(perr(0, "zero feature dimension".into()));
    }
    let labeled = rows[0].2.is_some();
    let mut max_label = 1usize;
    let mut examples = Vec::with_capacity(rows.len());
    for (lineno, entries, label) in rows {
        if label.is_some() != labeled {
            return Err(perr(lineno, "labeled and unlabeled lines mixed".into()));
        }
        let mut features = vec![0.0; dim];
        for (i, v) in entries {
            if i > dim {
                return Err(perr(lineno, format!("index {i} beyond dimension {dim}")));
            }
            features[i - 1] = v;
        }
        if let Some(l) = label {
            max_label = max_label.max(l);
        }
        examples.push(Example::Vector { features, label });
    }
    let label_set = if max_label <= 1 {
        default_binary_labels()
    } else {
        (0..=max_label).map(|c| c.to_string()).collect()
    };
    DomainDataset::new(domain_name_of(path), Task::Classification, label_set, dim, examples)
}

/// Writes a classification dataset in the format read by [`load_sparse`].
///
/// Values are printed in shortest round-trip form, so a reload is exact.
pub fn write_sparse(dataset: &DomainDataset, path: impl AsRef<Path>) -> Result<()> {
    if dataset.task != Task::Classification {
        return Err(Error::invalid("sparse format holds classification data only"));
    }
    let binary = dataset.num_classes() == 2;
    let mut out = format!("# dim={}\n", dataset.input_dim);
    for ex in &dataset.examples {
        let Example::Vector { features, label } = ex else {
            unreachable!("validated task")
        };
        match (label, binary) {
            (None, _) => out.push('?'),
            (Some(0), true) => out.push_str("-1"),
            (Some(_), true) => out.push_str("+1"),
            (Some(l), false) => {
                let _ = write!(out, "{l}");
            }
        }
        for (i, v) in features.iter().enumerate() {
            if *v != 0.0 {
                let _ = write!(out, " {}:{}", i + 1, v);
            }
        }
        out.push('\n');
    }
    write_text(path.as_ref(), &out)
}

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;

/// Token vocabulary with reserved padding (0) and unknown (1) ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new() -> Self {
        Self::from_tokens(Vec::new())
    }

    /// Rebuilds a vocabulary from its id-ordered token list (reserved
    /// entries are prepended when missing).
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let mut all = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        all.extend(tokens.into_iter().filter(|t| t != PAD_TOKEN && t != UNK_TOKEN));
        let mut vocab = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in all {
            vocab.insert(&t);
        }
        vocab
    }

    /// Vocabulary over every token in the given corpora.
    pub fn build<'a>(corpora: impl IntoIterator<Item = &'a TaggedCorpus>) -> Self {
        let mut vocab = Self::new();
        for c in corpora {
            for sentence in &c.sentences {
                for tok in sentence {
                    vocab.insert(&tok.token);
                }
            }
        }
        vocab
    }

    fn insert(&mut self, token: &str) -> usize {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len();
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    /// Id of `token`, or [`UNK_ID`].
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Restores the lookup table after deserialization.
    pub fn reindex(&mut self) {
        self.index = self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    }
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaggedToken {
    pub token: String,
    pub tag: Option<String>,
    pub line: usize,
}

/// Raw `token tag` corpus, before indexing against a vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct TaggedCorpus {
    pub name: String,
    pub sentences: Vec<Vec<TaggedToken>>,
}

impl TaggedCorpus {
    /// Parses two-column `token tag` lines; a blank line ends a sentence.
    /// One-column lines make an untagged corpus.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = read_text(path)?;
        let perr = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut sentences = Vec::new();
        let mut current = Vec::new();
        let mut tagged: Option<bool> = None;
        for (n, raw) in text.lines().enumerate() {
            let lineno = n + 1;
            let fields: Vec<&str> = raw.split_whitespace().collect();
            match fields.as_slice() {
                [] => {
                    if !current.is_empty() {
                        sentences.push(std::mem::take(&mut current));
                    }
                    continue;
                }
                [tok] | [tok, _] => {
                    let has_tag = fields.len() == 2;
                    if *tagged.get_or_insert(has_tag) != has_tag {
                        return Err(perr(lineno, "tagged and untagged lines mixed".into()));
                    }
                    current.push(TaggedToken {
                        token: tok.to_string(),
                        tag: fields.get(1).map(|t| t.to_string()),
                        line: lineno,
                    });
                }
                _ => {
                    return Err(perr(
                        lineno,
                        format!("expected `token tag`, got {} columns", fields.len()),
                    ))
                }
            }
        }
        if !current.is_empty() {
            sentences.push(current);
        }
        if sentences.is_empty() {
            return Err(perr(0, "no sentences in file".into()));
        }
        Ok(Self {
            name: domain_name_of(path),
            sentences,
        })
    }

    /// Tags in first-seen order.
    pub fn tag_set(&self) -> Vec<String> {
        let mut seen = Vec::new();
        for tok in self.sentences.iter().flatten() {
            if let Some(tag) = &tok.tag {
                if !seen.contains(tag) {
                    seen.push(tag.clone());
                }
            }
        }
        seen
    }

    /// Maps tokens through `vocab` (OOV → unknown id) and tags through the
    /// fixed `label_set`; an unknown tag is a parse error.
    pub fn index(&self, vocab: &Vocabulary, label_set: &[String]) -> Result<DomainDataset> {
        let tag_ids: HashMap<&str, usize> = label_set.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
        let mut examples = Vec::with_capacity(self.sentences.len());
        for sentence in &self.sentences {
            let tokens = sentence.iter().map(|t| vocab.id(&t.token)).collect();
            let tags = if sentence[0].tag.is_some() {
                let mut ids = Vec::with_capacity(sentence.len());
                for t in sentence {
                    let tag = t.tag.as_deref().unwrap_or_default();
                    ids.push(*tag_ids.get(tag).ok_or_else(|| Error::Parse {
                        path: self.name.clone().into(),
                        line: t.line,
                        msg: format!("unknown tag {tag:?}"),
                    })?);
                }
                Some(ids)
            } else {
                None
            };
            examples.push(Example::Sequence { tokens, tags });
        }
        DomainDataset::new(
            self.name.clone(),
            Task::SequenceTagging,
            label_set.to_vec(),
            vocab.len(),
            examples,
        )
    }
}

/// Reads and indexes a `token tag` file against a vocabulary and tag set.
pub fn load_token_tagged(path: impl AsRef<Path>, vocab: &Vocabulary, label_set: &[String]) -> Result<DomainDataset> {
    TaggedCorpus::read(path)?.index(vocab, label_set)
}

/// Writes a tagging dataset back to `token tag` lines.
pub fn write_tagged(dataset: &DomainDataset, vocab: &Vocabulary, path: impl AsRef<Path>) -> Result<()> {
    if dataset.task != Task::SequenceTagging {
        return Err(Error::invalid("token format holds tagging data only"));
    }
    let mut out = String::new();
    for ex in &dataset.examples {
        let Example::Sequence { tokens, tags } = ex else {
            unreachable!("validated task")
        };
        for (i, &tok) in tokens.iter().enumerate() {
            out.push_str(vocab.token(tok).unwrap_or(UNK_TOKEN));
            if let Some(tags) = tags {
                out.push(' ');
                out.push_str(&dataset.label_set[tags[i]]);
            }
            out.push('\n');
        }
        out.push('\n');
    }
    write_text(path.as_ref(), &out)
}

/// Seeded split into `(first, second)` with `fraction` of the examples in
/// the first part. Classification data is stratified by label.
pub fn split(dataset: &DomainDataset, fraction: f64, seed: u64) -> Result<(DomainDataset, DomainDataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid(format!("split fraction {fraction} not in (0, 1)")));
    }
    let mut rng = seeded_rng(seed, 0x5911);
    let groups: Vec<Vec<usize>> = if dataset.task == Task::Classification && dataset.is_labeled() {
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes()];
        for (i, ex) in dataset.examples.iter().enumerate() {
            if let Example::Vector { label: Some(l), .. } = ex {
                by_class[*l].push(i);
            }
        }
        by_class
    } else {
        vec![(0..dataset.len()).collect()]
    };

    // Largest-remainder allocation so the first part holds round(fraction * n).
    let total_first = (fraction * dataset.len() as f64).round() as usize;
    let exact: Vec<f64> = groups.iter().map(|g| fraction * g.len() as f64).collect();
    let mut quota: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut missing = total_first.saturating_sub(quota.iter().sum());
    for &g in order.iter().cycle().take(groups.len() * 2) {
        if missing == 0 {
            break;
        }
        if quota[g] < groups[g].len() {
            quota[g] += 1;
            missing -= 1;
        }
    }

    let mut first = Vec::new();
    let mut second = Vec::new();
    for (members, q) in groups.iter().zip(quota) {
        let perm = permutation(members.len(), &mut rng);
        for (rank, p) in perm.into_iter().enumerate() {
            if rank < q {
                first.push(members[p]);
            } else {
                second.push(members[p]);
            }
        }
    }
    if first.is_empty() || second.is_empty() {
        return Err(Error::invalid(format!(
            "split of {} examples at fraction {fraction} leaves a part empty",
            dataset.len()
        )));
    }
    first.sort_unstable();
    second.sort_unstable();
    Ok((
        dataset.subset(dataset.name.clone(), &first),
        dataset.subset(format!("{}-heldout", dataset.name), &second),
    ))
}

/// Parameters of the synthetic multi-domain generator.
///
/// Every regular domain draws class-conditional isotropic Gaussians around
/// shared class prototypes, then rotates them (turning the decision
/// boundary) and translates them by amounts proportional to
/// `domain_shift`. The target samples one half-space sub-region of each
/// regular domain. Outlier domains reuse the regular domains' features but
/// replace a `outlier_noise` fraction of labels with draws from
/// `outlier_label_prior`, independent of the features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub k: usize,
    pub classes: usize,
    pub dim: usize,
    pub per_domain_n: usize,
    pub domain_shift: f64,
    pub outlier_domains: usize,
    pub outlier_noise: f64,
    /// Outlier size as a multiple of `per_domain_n`.
    pub outlier_scale: f64,
    /// Label prior for replaced outlier labels; uniform when `None`.
    pub outlier_label_prior: Option<Vec<f64>>,
    /// Distance between class prototypes.
    pub class_sep: f64,
    /// Translation length per unit of `domain_shift`.
    pub translation: f64,
    /// Rotation angle (radians) between consecutive domains per unit of `domain_shift`.
    pub rotation: f64,
    pub noise_std: f64,
    pub target_n: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            k: 3,
            classes: 2,
            dim: 10,
            per_domain_n: 200,
            domain_shift: 1.0,
            outlier_domains: 0,
            outlier_noise: 1.0,
            outlier_scale: 1.0,
            outlier_label_prior: None,
            class_sep: 3.0,
            translation: 6.0,
            rotation: std::f64::consts::FRAC_PI_3,
            noise_std: 1.0,
            target_n: 200,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(format!("synth spec: {m}")));
        if self.k < 2 {
            return bad("k must be at least 2");
        }
        if self.classes < 2 {
            return bad("need at least two classes");
        }
        if self.dim < 2 {
            return bad("dim must be at least 2");
        }
        if self.per_domain_n < 2 * self.classes {
            return bad("per_domain_n must be at least 2 * classes");
        }
        if self.target_n == 0 {
            return bad("target_n must be positive");
        }
        if !(0.0..=1.0).contains(&self.outlier_noise) {
            return bad("outlier_noise must lie in [0, 1]");
        }
        if !(self.outlier_scale > 0.0) {
            return bad("outlier_scale must be positive");
        }
        if let Some(prior) = &self.outlier_label_prior {
            if prior.len() != self.classes
                || prior.iter().any(|p| !(p.is_finite() && *p >= 0.0))
                || prior.iter().sum::<f64>() <= 0.0
            {
                return bad("outlier_label_prior must be non-negative with one entry per class");
            }
        }
        if !(self.domain_shift >= 0.0 && self.class_sep >= 0.0 && self.noise_std > 0.0) {
            return bad("domain_shift, class_sep must be non-negative and noise_std positive");
        }
        Ok(())
    }
}

/// Output of [`synthesize`]. Outlier domains come last in `sources`.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub sources: Vec<DomainDataset>,
    pub target: DomainDataset,
    pub outlier_count: usize,
}

impl SynthData {
    pub fn is_outlier(&self, source: usize) -> bool {
        source >= self.sources.len() - self.outlier_count
    }
}

struct DomainGeometry {
    /// Class means after rotation and translation.
    class_means: Vec<Vec<f64>>,
    center: Vec<f64>,
    /// Normal of the half-space this domain contributes to the target.
    region_normal: Vec<f64>,
}

fn unit_vector<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| gaussian(rng)).collect();
        let n = dot(&v, &v).sqrt();
        if n > 1e-8 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Unit vector orthogonal to the unit vector `u`.
fn orthogonal_unit<R: Rng + ?Sized>(u: &[f64], rng: &mut R) -> Vec<f64> {
    loop {
        let mut v = unit_vector(u.len(), rng);
        let p = dot(&v, u);
        v.iter_mut().zip(u).for_each(|(vi, ui)| *vi -= p * ui);
        let n = dot(&v, &v).sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Rotates `x` by `theta` inside the plane spanned by orthonormal `u`, `v`.
fn rotate_in_plane(x: &[f64], u: &[f64], v: &[f64], theta: f64) -> Vec<f64> {
    let (a, b) = (dot(x, u), dot(x, v));
    let (s, c) = theta.sin_cos();
    let (ra, rb) = (c * a - s * b, s * a + c * b);
    x.iter()
        .zip(u.iter().zip(v))
        .map(|(xi, (ui, vi))| xi + (ra - a) * ui + (rb - b) * vi)
        .collect()
}

/// Draws the regular domains, optional outlier domains and the target.
pub fn synthesize(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let mut rng = seeded_rng(spec.seed, 0x5e7);
    let dim = spec.dim;

    // Class prototypes: antipodal for two classes, random directions otherwise.
    let axis = unit_vector(dim, &mut rng);
    let prototypes: Vec<Vec<f64>> = if spec.classes == 2 {
        let half = spec.class_sep / 2.0;
        vec![
            axis.iter().map(|a| -half * a).collect(),
            axis.iter().map(|a| half * a).collect(),
        ]
    } else {
        (0..spec.classes)
            .map(|_| {
                unit_vector(dim, &mut rng)
                    .into_iter()
                    .map(|x| x * spec.class_sep / 2.0)
                    .collect()
            })
            .collect()
    };
    let plane = orthogonal_unit(&axis, &mut rng);

    let centered = (spec.k as f64 - 1.0) / 2.0;
    let geometry: Vec<DomainGeometry> = (0..spec.k)
        .map(|k| {
            let theta = spec.domain_shift * spec.rotation * (k as f64 - centered);
            let center: Vec<f64> = unit_vector(dim, &mut rng)
                .into_iter()
                .map(|x| x * spec.domain_shift * spec.translation)
                .collect();
            let class_means = prototypes
                .iter()
                .map(|p| {
                    rotate_in_plane(p, &axis, &plane, theta)
                        .into_iter()
                        .zip(&center)
                        .map(|(a, c)| a + c)
                        .collect()
                })
                .collect();
            DomainGeometry {
                class_means,
                center,
                region_normal: unit_vector(dim, &mut rng),
            }
        })
        .collect();

    let label_names: Vec<String> = if spec.classes == 2 {
        default_binary_labels()
    } else {
        (0..spec.classes).map(|c| c.to_string()).collect()
    };

    let draw = |g: &DomainGeometry, class: usize, rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
        g.class_means[class]
            .iter()
            .map(|m| m + spec.noise_std * gaussian(rng))
            .collect()
    };

    let mut sources = Vec::with_capacity(spec.k + spec.outlier_domains);
    for (k, g) in geometry.iter().enumerate() {
        let examples = (0..spec.per_domain_n)
            .map(|i| {
                let class = i % spec.classes;
                Example::Vector {
                    features: draw(g, class, &mut rng),
                    label: Some(class),
                }
            })
            .collect();
        sources.push(DomainDataset::new(
            format!("source_{k}"),
            Task::Classification,
            label_names.clone(),
            dim,
            examples,
        )?);
    }

    let prior = spec
        .outlier_label_prior
        .clone()
        .unwrap_or_else(|| vec![1.0; spec.classes]);
    let prior_total: f64 = prior.iter().sum();
    let outlier_n = ((spec.per_domain_n as f64) * spec.outlier_scale).round().max(1.0) as usize;
    for o in 0..spec.outlier_domains {
        let examples = (0..outlier_n)
            .map(|_| {
                let g = &geometry[rng.random_range(0..spec.k)];
                let true_class = rng.random_range(0..spec.classes);
                let features = draw(g, true_class, &mut rng);
                let label = if rng.random::<f64>() < spec.outlier_noise {
                    let mut u = rng.random::<f64>() * prior_total;
                    prior
                        .iter()
                        .position(|p| {
                            u -= p;
                            u < 0.0
                        })
                        .unwrap_or(spec.classes - 1)
                } else {
                    true_class
                };
                Example::Vector {
                    features,
                    label: Some(label),
                }
            })
            .collect();
        sources.push(DomainDataset::new(
            format!("outlier_{o}"),
            Task::Classification,
            label_names.clone(),
            dim,
            examples,
        )?);
    }

    // Target: equal shares of each regular domain, restricted to a half-space
    // through the domain center.
    let mut target = Vec::with_capacity(spec.target_n);
    for i in 0..spec.target_n {
        let g = &geometry[i % spec.k];
        let class = (i / spec.k) % spec.classes;
        let features = loop {
            let x = draw(g, class, &mut rng);
            let offset: Vec<f64> = x.iter().zip(&g.center).map(|(a, c)| a - c).collect();
            if dot(&offset, &g.region_normal) >= 0.0 {
                break x;
            }
        };
        target.push(Example::Vector {
            features,
            label: Some(class),
        });
    }
    let target = DomainDataset::new("target", Task::Classification, label_names, dim, target)?;

    Ok(SynthData {
        sources,
        target,
        outlier_count: spec.outlier_domains,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn sparse_line_maps_to_dense() {
        let f = write_tmp("+1 1:0.5 3:0.2\n");
        let ds = load_sparse(f.path(), Some(4)).unwrap();
        assert_eq!(
            ds.examples,
            vec![Example::Vector {
                features: vec![0.5, 0.0, 0.2, 0.0],
                label: Some(1)
            }]
        );
        let f = write_tmp("-1 2:1\n+1\n");
        let ds = load_sparse(f.path(), None).unwrap();
        assert_eq!(ds.input_dim, 2);
        assert_eq!(ds.examples[1].unit_labels(), Some(vec![1]));
    }

    #[test]
    fn harmonize_pads_and_widens() {
        let a = DomainDataset::new(
            "a",
            Task::Classification,
            default_binary_labels(),
            2,
            vec![Example::Vector {
                features: vec![1.0, 2.0],
                label: Some(1),
            }],
        )
        .unwrap();
        let b = DomainDataset::new(
            "b",
            Task::Classification,
            vec!["0".into(), "1".into(), "2".into()],
            3,
            vec![Example::Vector {
                features: vec![0.0, 0.0, 3.0],
                label: Some(2),
            }],
        )
        .unwrap();
        let mut all = vec![a, b];
        harmonize(&mut all).unwrap();
        assert!(check_compatible(&[&all[0], &all[1]]).is_ok());
        assert_eq!(
            all[0].examples[0],
            Example::Vector {
                features: vec![1.0, 2.0, 0.0],
                label: Some(1)
            }
        );
        assert_eq!(all[0].label_set, vec!["0", "1", "2"]);
        all.iter().for_each(|d| d.validate().unwrap());
    }

    #[test]
    fn sparse_errors() {
        let f = write_tmp("");
        assert!(matches!(load_sparse(f.path(), Some(4)), Err(Error::Parse { .. })));
        let f = write_tmp("+1 1:0.5\n+1 5:1.0\n");
        match load_sparse(f.path(), Some(4)) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        let f = write_tmp("+1 1:0.5\nbanana 1:2\n");
        assert!(matches!(load_sparse(f.path(), None), Err(Error::Parse { line: 2, .. })));
        let f = write_tmp("+1 2:0.5 1:1\n");
        assert!(matches!(load_sparse(f.path(), None), Err(Error::Parse { line: 1, .. })));
        let f = write_tmp("+1 1:0.5\n? 1:1\n");
        assert!(load_sparse(f.path(), None).is_err());
    }

    #[test]
    fn sparse_round_trip() {
        let data = synthesize(&SynthSpec {
            per_domain_n: 20,
            target_n: 10,
            seed: 9,
            ..SynthSpec::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.svm");
        write_sparse(&data.sources[0], &path).unwrap();
        let back = load_sparse(&path, None).unwrap();
        assert_eq!(back.input_dim, data.sources[0].input_dim);
        for (a, b) in back.examples.iter().zip(&data.sources[0].examples) {
            let (
                Example::Vector {
                    features: fa,
                    label: la,
                },
                Example::Vector {
                    features: fb,
                    label: lb,
                },
            ) = (a, b)
            else {
                panic!("vector expected")
            };
            assert_eq!(la, lb);
            for (x, y) in fa.iter().zip(fb) {
                assert!((x - y).abs() <= 1e-9);
            }
        }
        let unl = data.target.unlabeled();
        write_sparse(&unl, &path).unwrap();
        assert!(!load_sparse(&path, None).unwrap().is_labeled());
    }

    const CORPUS: &str = "the DET\ndog NOUN\nbarks VERB\n\na DET\ncat NOUN\n";

    #[test]
    fn tagged_corpus_parsing() {
        let f = write_tmp(CORPUS);
        let corpus = TaggedCorpus::read(f.path()).unwrap();
        let vocab = Vocabulary::build([&corpus]);
        let tags = corpus.tag_set();
        let ds = corpus.index(&vocab, &tags).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.examples[0].unit_count(), 3);
        assert_eq!(ds.examples[1].unit_count(), 2);
        assert_eq!(ds.unit_count(), 5);

        let g = write_tmp(&format!("{CORPUS}\n"));
        let again = load_token_tagged(g.path(), &vocab, &tags).unwrap();
        assert_eq!(again.examples, ds.examples);
    }

    #[test]
    fn tagged_unknowns() {
        let f = write_tmp(CORPUS);
        let corpus = TaggedCorpus::read(f.path()).unwrap();
        let vocab = Vocabulary::build([&corpus]);
        let tags = corpus.tag_set();
        let g = write_tmp("the DET\nzebra NOUN\n");
        let ds = load_token_tagged(g.path(), &vocab, &tags).unwrap();
        let Example::Sequence { tokens, .. } = &ds.examples[0] else {
            panic!()
        };
        assert_eq!(tokens[1], UNK_ID);
        let h = write_tmp("the DET\nquickly ADV\n");
        assert!(matches!(
            load_token_tagged(h.path(), &vocab, &tags),
            Err(Error::Parse { line: 2, .. })
        ));
        let bad = write_tmp("a b c\n");
        assert!(matches!(
            TaggedCorpus::read(bad.path()),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn tagged_round_trip() {
        let f = write_tmp(CORPUS);
        let corpus = TaggedCorpus::read(f.path()).unwrap();
        let mut vocab = Vocabulary::build([&corpus]);
        let tags = corpus.tag_set();
        let ds = corpus.index(&vocab, &tags).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.txt");
        write_tagged(&ds, &vocab, &path).unwrap();
        assert_eq!(load_token_tagged(&path, &vocab, &tags).unwrap().examples, ds.examples);

        let json = serde_json::to_string(&vocab).unwrap();
        let mut back: Vocabulary = serde_json::from_str(&json).unwrap();
        back.reindex();
        vocab.reindex();
        assert_eq!(back, vocab);
        assert_eq!(back.id("dog"), vocab.id("dog"));
    }

    fn balanced(n: usize) -> DomainDataset {
        let examples = (0..n)
            .map(|i| Example::Vector {
                features: vec![i as f64, 1.0],
                label: Some(i % 2),
            })
            .collect();
        DomainDataset::new("b", Task::Classification, default_binary_labels(), 2, examples).unwrap()
    }

    #[test]
    fn split_stratifies_and_covers() {
        let ds = balanced(10);
        let (a, b) = split(&ds, 0.5, 3).unwrap();
        assert_eq!((a.len(), b.len()), (5, 5));
        let pos = a.examples.iter().filter(|e| e.unit_labels() == Some(vec![1])).count();
        assert!(pos == 2 || pos == 3);
        let (a2, b2) = split(&ds, 0.5, 3).unwrap();
        assert_eq!(a, a2);
        assert_eq!(b, b2);

        let ds = balanced(20);
        let (a, b) = split(&ds, 0.5, 1).unwrap();
        for part in [&a, &b] {
            let pos = part
                .examples
                .iter()
                .filter(|e| e.unit_labels() == Some(vec![1]))
                .count();
            assert_eq!(pos, 5);
        }
        let mut all: Vec<String> = a.examples.iter().chain(&b.examples).map(|e| format!("{e:?}")).collect();
        let mut orig: Vec<String> = ds.examples.iter().map(|e| format!("{e:?}")).collect();
        all.sort();
        orig.sort();
        assert_eq!(all, orig);

        assert!(split(&ds, 0.0, 1).is_err());
        assert!(split(&balanced(2), 0.1, 1).is_err());
    }

    #[test]
    fn synthesize_is_deterministic_and_shaped() {
        let spec = SynthSpec {
            per_domain_n: 40,
            target_n: 30,
            outlier_domains: 1,
            seed: 5,
            ..SynthSpec::default()
        };
        let a = synthesize(&spec).unwrap();
        let b = synthesize(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.sources.len(), 4);
        assert!(a.is_outlier(3) && !a.is_outlier(2));
        assert_eq!(a.target.len(), 30);
        assert!(synthesize(&SynthSpec { k: 1, ..spec.clone() }).is_err());
        assert!(synthesize(&SynthSpec {
            per_domain_n: 3,
            ..spec
        })
        .is_err());
    }

    #[test]
    fn zero_shift_gives_identical_domain_geometry() {
        let spec = SynthSpec {
            domain_shift: 0.0,
            per_domain_n: 2000,
            ..SynthSpec::default()
        };
        let data = synthesize(&spec).unwrap();
        let mean = |d: &DomainDataset, class: usize| -> Vec<f64> {
            let rows: Vec<&Vec<f64>> = d
                .examples
                .iter()
                .filter_map(|e| match e {
                    Example::Vector { features, label } if *label == Some(class) => Some(features),
                    _ => None,
                })
                .collect();
            (0..spec.dim)
                .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64)
                .collect()
        };
        for class in 0..2 {
            let m0 = mean(&data.sources[0], class);
            let m2 = mean(&data.sources[2], class);
            let gap = crate::numerics::squared_distance(&m0, &m2).sqrt();
            // sampling noise of a difference of two means of 1000 N(0,1) draws in 10 dims
            assert!(gap < 0.3, "class {class} gap {gap}");
        }
    }
}
