//! Corpora, class splits and N-way K-shot episode sampling.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::wordrep::{
    self, embed_label_name, embed_sequence, tokenize, LabelNameVectors, PrecomputedRecord,
    TokenSequence, WordRepError, WordVectorTable,
};

#[derive(Debug, Error)]
pub enum EpisodeError {
    #[error("episodes: cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("episodes: {path} line {line}: {msg}")]
    Format {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("episodes: split lists overlap on label {label:?} ({first} and {second})")]
    Split {
        label: String,
        first: Split,
        second: Split,
    },
    #[error("episodes: {0}")]
    Sampling(String),
    #[error("episodes: no vector for label {0:?}")]
    MissingLabelVector(String),
    #[error("episodes: invalid synthetic spec: {0}")]
    Synthetic(String),
    #[error("episodes: text data requires a word-vector table")]
    NoTable,
    #[error(transparent)]
    WordRep(#[from] WordRepError),
}

pub type Result<T> = std::result::Result<T, EpisodeError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

/// The samples of one split, grouped by class, together with the vector of
/// every class's label name.
#[derive(Debug, Clone)]
pub struct LabeledCorpus {
    pub split: Split,
    samples: Vec<TokenSequence>,
    classes: BTreeMap<String, Vec<usize>>,
    label_vectors: BTreeMap<String, Array1<f64>>,
}

impl LabeledCorpus {
    pub fn new(
        split: Split,
        samples: Vec<TokenSequence>,
        label_vectors: BTreeMap<String, Array1<f64>>,
    ) -> Result<Self> {
        let mut classes: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            if !label_vectors.contains_key(&s.label) {
                return Err(EpisodeError::MissingLabelVector(s.label.clone()));
            }
            classes.entry(s.label.clone()).or_default().push(i);
        }
        let label_vectors = label_vectors
            .into_iter()
            .filter(|(l, _)| classes.contains_key(l))
            .collect();
        Ok(LabeledCorpus {
            split,
            samples,
            classes,
            label_vectors,
        })
    }

    pub fn samples(&self) -> &[TokenSequence] {
        &self.samples
    }

    pub fn classes(&self) -> &BTreeMap<String, Vec<usize>> {
        &self.classes
    }

    pub fn label_vector(&self, label: &str) -> Option<&Array1<f64>> {
        self.label_vectors.get(label)
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn dim(&self) -> Option<usize> {
        self.samples.first().map(TokenSequence::dim)
    }

    /// Classes holding at least `min_size` samples, in label order.
    pub fn eligible_classes(&self, min_size: usize) -> Vec<&str> {
        self.classes
            .iter()
            .filter(|(_, idx)| idx.len() >= min_size)
            .map(|(l, _)| l.as_str())
            .collect()
    }

    /// Classes holding fewer than `min_size` samples, with their sizes.
    pub fn undersized_classes(&self, min_size: usize) -> Vec<(String, usize)> {
        self.classes
            .iter()
            .filter(|(_, idx)| idx.len() < min_size)
            .map(|(l, idx)| (l.clone(), idx.len()))
            .collect()
    }

    /// SHA-256 over labels, ids, tokens and the exact bits of every vector.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.samples {
            h.update(s.source_id.as_bytes());
            h.update([0]);
            h.update(s.label.as_bytes());
            h.update([0]);
            for t in &s.tokens {
                h.update(t.as_bytes());
                h.update([1]);
            }
            for v in s.vectors.iter() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        for (label, v) in &self.label_vectors {
            h.update(label.as_bytes());
            for x in v.iter() {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Class lists per split, as stored in the split JSON file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: Vec<String>,
    pub valid: Vec<String>,
    pub test: Vec<String>,
}

impl SplitSpec {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| EpisodeError::Io {
            path: path.to_owned(),
            source,
        })?;
        let spec: SplitSpec = serde_json::from_str(&text).map_err(|e| EpisodeError::Format {
            path: path.to_owned(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        spec.validate()?;
        Ok(spec)
    }

    /// Fails if any label appears in more than one list.
    pub fn validate(&self) -> Result<()> {
        let mut owner: BTreeMap<&str, Split> = BTreeMap::new();
        for (split, labels) in self.lists() {
            for l in labels {
                if let Some(&first) = owner.get(l.as_str()) {
                    return Err(EpisodeError::Split {
                        label: l.clone(),
                        first,
                        second: split,
                    });
                }
                owner.insert(l, split);
            }
        }
        Ok(())
    }

    fn lists(&self) -> [(Split, &Vec<String>); 3] {
        [
            (Split::Train, &self.train),
            (Split::Valid, &self.valid),
            (Split::Test, &self.test),
        ]
    }

    pub fn split_of(&self, label: &str) -> Option<Split> {
        self.lists()
            .into_iter()
            .find(|(_, ls)| ls.iter().any(|l| l == label))
            .map(|(s, _)| s)
    }
}

/// Draws disjoint train/valid/test class lists of the requested sizes.
/// Each list is returned sorted.
pub fn make_splits(labels: &[String], counts: [usize; 3], seed: u64) -> Result<SplitSpec> {
    let mut unique: Vec<String> = labels
        .iter()
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let wanted: usize = counts.iter().sum();
    if wanted > unique.len() {
        return Err(EpisodeError::Sampling(format!(
            "requested {wanted} classes ({}/{}/{}) but only {} are available",
            counts[0],
            counts[1],
            counts[2],
            unique.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    unique.shuffle(&mut rng);
    let mut it = unique.into_iter();
    let mut take = |n: usize| {
        let mut v: Vec<String> = it.by_ref().take(n).collect();
        v.sort();
        v
    };
    Ok(SplitSpec {
        train: take(counts[0]),
        valid: take(counts[1]),
        test: take(counts[2]),
    })
}

/// Where label-name vectors come from.
#[derive(Debug, Clone, Copy, Default)]
pub struct LabelSource<'a> {
    /// Word table; also required to embed raw-text data.
    pub table: Option<&'a WordVectorTable>,
    /// Explicit per-label vectors, consulted before the table.
    pub label_vectors: Option<&'a BTreeMap<String, Array1<f64>>>,
}

impl LabelSource<'_> {
    fn vector_for(&self, label: &str) -> Result<Array1<f64>> {
        if let Some(v) = self.label_vectors.and_then(|m| m.get(label)) {
            return Ok(v.clone());
        }
        match self.table {
            Some(t) => Ok(embed_label_name(t, label)?),
            None => Err(EpisodeError::MissingLabelVector(label.to_owned())),
        }
    }
}

/// Reads label-name vectors stored in the precomputed JSONL format: the
/// `label` field names the class and the label vector is the mean of `vectors`.
pub fn load_label_vectors(path: impl AsRef<Path>) -> Result<BTreeMap<String, Array1<f64>>> {
    Ok(wordrep::load_precomputed(path)?
        .into_iter()
        .map(|s| {
            let v = s.mean_vector();
            (s.label, v)
        })
        .collect())
}

/// Counts gathered while loading a dataset.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct LoadReport {
    pub dropped_unlisted: usize,
    pub unlisted_labels: Vec<String>,
    pub dropped_unrepresentable: usize,
    /// `(split, label, size)` for classes below the requested minimum size.
    pub undersized: Vec<(Split, String, usize)>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: LabeledCorpus,
    pub valid: LabeledCorpus,
    pub test: LabeledCorpus,
    pub report: LoadReport,
}

impl Dataset {
    pub fn corpus(&self, split: Split) -> &LabeledCorpus {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum TextField {
    Raw(String),
    Tokens(Vec<String>),
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum LabelField {
    Name(String),
    Index(i64),
}

impl LabelField {
    fn into_string(self) -> String {
        match self {
            LabelField::Name(s) => s,
            LabelField::Index(i) => i.to_string(),
        }
    }
}

#[derive(Debug, Deserialize)]
struct TextRecord {
    #[serde(default)]
    id: Option<String>,
    text: TextField,
    label: LabelField,
}

enum RawSample {
    Text {
        id: String,
        label: String,
        text: TextField,
    },
    Embedded(TokenSequence),
}

impl RawSample {
    fn label(&self) -> &str {
        match self {
            RawSample::Text { label, .. } => label,
            RawSample::Embedded(s) => &s.label,
        }
    }
}

fn read_raw_samples(path: &Path) -> Result<Vec<RawSample>> {
    let file = File::open(path).map_err(|source| EpisodeError::Io {
        path: path.to_owned(),
        source,
    })?;
    let mut out = Vec::new();
    let mut dim: Option<usize> = None;
    for (offset, line) in BufReader::new(file).lines().enumerate() {
        let line_no = offset + 1;
        let line = line.map_err(|source| EpisodeError::Io {
            path: path.to_owned(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let format_err = |msg: String| EpisodeError::Format {
            path: path.to_owned(),
            line: line_no,
            msg,
        };
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| format_err(e.to_string()))?;
        if value.get("vectors").is_some() {
            let rec: PrecomputedRecord =
                serde_json::from_value(value).map_err(|e| format_err(e.to_string()))?;
            let seq = wordrep::record_to_sequence(rec, &mut dim, line_no)
                .map_err(|e| format_err(e.to_string()))?;
            out.push(RawSample::Embedded(seq));
        } else {
            let rec: TextRecord =
                serde_json::from_value(value).map_err(|e| format_err(e.to_string()))?;
            out.push(RawSample::Text {
                id: rec.id.unwrap_or_else(|| format!("line-{line_no}")),
                label: rec.label.into_string(),
                text: rec.text,
            });
        }
    }
    Ok(out)
}

/// Labels present in a dataset file, sorted and deduplicated.
pub fn dataset_labels(data_path: impl AsRef<Path>) -> Result<Vec<String>> {
    let samples = read_raw_samples(data_path.as_ref())?;
    Ok(samples
        .iter()
        .map(|s| s.label().to_owned())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect())
}

/// Loads a JSONL dataset (raw text or precomputed vectors) and divides it by
/// the class lists in `split_path`. Classes smaller than `min_class_size` are
/// listed in the returned report.
pub fn load_dataset(
    data_path: impl AsRef<Path>,
    split_path: impl AsRef<Path>,
    labels: LabelSource<'_>,
    min_class_size: usize,
) -> Result<Dataset> {
    let split = SplitSpec::load(split_path)?;
    let raw = read_raw_samples(data_path.as_ref())?;
    build_dataset(raw, &split, labels, min_class_size)
}

fn build_dataset(
    raw: Vec<RawSample>,
    split: &SplitSpec,
    labels: LabelSource<'_>,
    min_class_size: usize,
) -> Result<Dataset> {
    let mut report = LoadReport::default();
    let mut unlisted = BTreeSet::new();
    let mut buckets: BTreeMap<Split, Vec<TokenSequence>> = BTreeMap::new();
    for sample in raw {
        let Some(which) = split.split_of(sample.label()) else {
            report.dropped_unlisted += 1;
            unlisted.insert(sample.label().to_owned());
            continue;
        };
        let seq = match sample {
            RawSample::Embedded(seq) => seq,
            RawSample::Text { id, label, text } => {
                let table = labels.table.ok_or(EpisodeError::NoTable)?;
                let tokens = match text {
                    TextField::Raw(s) => tokenize(&s),
                    TextField::Tokens(t) => tokenize(&t.join(" ")),
                };
                match tokens.and_then(|t| embed_sequence(table, &t, &label, &id)) {
                    Ok(seq) => seq,
                    Err(WordRepError::EmptySequence) => {
                        report.dropped_unrepresentable += 1;
                        continue;
                    }
                    Err(e) => return Err(e.into()),
                }
            }
        };
        buckets.entry(which).or_default().push(seq);
    }
    if !unlisted.is_empty() {
        log::warn!(
            "dropped {} samples whose labels are in no split: {:?}",
            report.dropped_unlisted,
            unlisted
        );
    }
    if report.dropped_unrepresentable > 0 {
        log::warn!(
            "dropped {} samples with no representable token",
            report.dropped_unrepresentable
        );
    }
    report.unlisted_labels = unlisted.into_iter().collect();

    let mut build = |which: Split, listed: &[String]| -> Result<LabeledCorpus> {
        let samples = buckets.remove(&which).unwrap_or_default();
        let present: BTreeSet<&str> = samples.iter().map(|s| s.label.as_str()).collect();
        let mut vectors = BTreeMap::new();
        for label in listed.iter().filter(|l| present.contains(l.as_str())) {
            vectors.insert(label.clone(), labels.vector_for(label)?);
        }
        let corpus = LabeledCorpus::new(which, samples, vectors)?;
        for (label, size) in corpus.undersized_classes(min_class_size) {
            log::warn!("{which} class {label:?} has {size} < {min_class_size} samples");
            report.undersized.push((which, label, size));
        }
        Ok(corpus)
    };
    let train = build(Split::Train, &split.train)?;
    let valid = build(Split::Valid, &split.valid)?;
    let test = build(Split::Test, &split.test)?;
    Ok(Dataset {
        train,
        valid,
        test,
        report,
    })
}

/// One N-way K-shot task.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub n_way: usize,
    pub k_shot: usize,
    pub m_query: usize,
    /// Class-major: `support[c]` holds the K samples of class `c`.
    pub support: Vec<Vec<TokenSequence>>,
    pub query: Vec<TokenSequence>,
    /// Episode-local class index of every query.
    pub query_labels: Vec<usize>,
    pub label_names: LabelNameVectors,
    pub episode_seed: u64,
}

impl Episode {
    pub fn dim(&self) -> usize {
        self.label_names.vectors.ncols()
    }

    pub fn class_names(&self) -> &[String] {
        &self.label_names.names
    }
}

/// Samples an episode; the episode seed is drawn from `rng` so the episode can
/// later be rebuilt with [`sample_episode_seeded`].
pub fn sample_episode<R: Rng + ?Sized>(
    corpus: &LabeledCorpus,
    n: usize,
    k: usize,
    m: usize,
    rng: &mut R,
) -> Result<Episode> {
    let seed = rng.random::<u64>();
    sample_episode_seeded(corpus, n, k, m, seed)
}

pub fn sample_episode_seeded(
    corpus: &LabeledCorpus,
    n: usize,
    k: usize,
    m: usize,
    episode_seed: u64,
) -> Result<Episode> {
    if n == 0 || k == 0 {
        return Err(EpisodeError::Sampling(format!(
            "n_way and k_shot must be positive (got {n}, {k})"
        )));
    }
    let per_class = k + m;
    let eligible = corpus.eligible_classes(per_class);
    if eligible.len() < n {
        let deficient: Vec<String> = corpus
            .undersized_classes(per_class)
            .into_iter()
            .map(|(l, size)| format!("{l:?} ({size})"))
            .collect();
        return Err(EpisodeError::Sampling(format!(
            "{} split has {} classes with >= {per_class} samples, need {n}; deficient: [{}]",
            corpus.split,
            eligible.len(),
            deficient.join(", ")
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(episode_seed);
    let chosen: Vec<&str> = index::sample(&mut rng, eligible.len(), n)
        .into_iter()
        .map(|i| eligible[i])
        .collect();

    let mut support = Vec::with_capacity(n);
    let mut query = Vec::with_capacity(n * m);
    let mut query_labels = Vec::with_capacity(n * m);
    let mut label_rows = Vec::with_capacity(n);
    for (c, &label) in chosen.iter().enumerate() {
        let members = &corpus.classes[label];
        let picks = index::sample(&mut rng, members.len(), per_class).into_vec();
        let samples = &corpus.samples;
        support.push(picks[..k].iter().map(|&i| samples[members[i]].clone()).collect());
        for &i in &picks[k..] {
            query.push(samples[members[i]].clone());
            query_labels.push(c);
        }
        label_rows.push(
            corpus
                .label_vector(label)
                .ok_or_else(|| EpisodeError::MissingLabelVector(label.to_owned()))?
                .clone(),
        );
    }
    let names = chosen.iter().map(|s| s.to_string()).collect();
    Ok(Episode {
        n_way: n,
        k_shot: k,
        m_query: m,
        support,
        query,
        query_labels,
        label_names: LabelNameVectors::from_rows(names, &label_rows),
        episode_seed,
    })
}

/// Gaussian classes around uniformly drawn centers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_way: usize,
    pub k_shot: usize,
    pub m_query: usize,
    pub dim: usize,
    pub class_center_scale: f64,
    pub intra_class_stddev: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_way == 0 || self.k_shot == 0 || self.m_query == 0 || self.dim == 0 {
            return Err(EpisodeError::Synthetic("all counts must be >= 1".into()));
        }
        if !(self.intra_class_stddev > 0.0) || !self.class_center_scale.is_finite() {
            return Err(EpisodeError::Synthetic(
                "stddev must be > 0 and scale finite".into(),
            ));
        }
        Ok(())
    }
}

fn draw_centers<R: Rng + ?Sized>(n: usize, dim: usize, scale: f64, rng: &mut R) -> Array2<f64> {
    let scale = scale.abs();
    if scale == 0.0 {
        return Array2::zeros((n, dim));
    }
    let uniform = Uniform::new_inclusive(-scale, scale).expect("finite bounds");
    Array2::from_shape_simple_fn((n, dim), || uniform.sample(rng))
}

fn noisy_sample<R: Rng + ?Sized>(
    center: ndarray::ArrayView1<'_, f64>,
    noise: &Normal<f64>,
    rng: &mut R,
    label: &str,
    id: String,
) -> TokenSequence {
    let v = center.mapv(|c| c + noise.sample(rng));
    let vectors = v.insert_axis(ndarray::Axis(0));
    TokenSequence::new(vec!["x".into()], vectors, label, id).expect("one row")
}

/// Generates a synthetic episode whose label vectors are the true class
/// centers. Returns the episode and the `n_way × dim` center matrix.
pub fn gen_synthetic_episode<R: Rng + ?Sized>(
    spec: &SyntheticSpec,
    rng: &mut R,
) -> Result<(Episode, Array2<f64>)> {
    spec.validate()?;
    let centers = draw_centers(spec.n_way, spec.dim, spec.class_center_scale, rng);
    let noise = Normal::new(0.0, spec.intra_class_stddev)
        .map_err(|e| EpisodeError::Synthetic(e.to_string()))?;
    let names: Vec<String> = (0..spec.n_way).map(|c| format!("class-{c}")).collect();
    let mut support = Vec::with_capacity(spec.n_way);
    let mut query = Vec::with_capacity(spec.n_way * spec.m_query);
    let mut query_labels = Vec::with_capacity(spec.n_way * spec.m_query);
    for (c, name) in names.iter().enumerate() {
        let center = centers.row(c);
        support.push(
            (0..spec.k_shot)
                .map(|i| noisy_sample(center, &noise, rng, name, format!("syn-{c}-s{i}")))
                .collect(),
        );
        for i in 0..spec.m_query {
            query.push(noisy_sample(center, &noise, rng, name, format!("syn-{c}-q{i}")));
            query_labels.push(c);
        }
    }
    let episode = Episode {
        n_way: spec.n_way,
        k_shot: spec.k_shot,
        m_query: spec.m_query,
        support,
        query,
        query_labels,
        label_names: LabelNameVectors {
            names,
            vectors: centers.clone(),
        },
        episode_seed: spec.seed,
    };
    Ok((episode, centers))
}

/// A synthetic dataset with disjoint train/valid/test classes.
///
/// Class centers are non-zero only in the first `signal_dims` coordinates
/// (all of them when `None`); every coordinate receives isotropic noise, and
/// each sample has `tokens_per_sample` noisy token vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpusSpec {
    pub classes: [usize; 3],
    pub samples_per_class: usize,
    pub dim: usize,
    pub class_center_scale: f64,
    pub intra_class_stddev: f64,
    #[serde(default)]
    pub signal_dims: Option<usize>,
    #[serde(default = "one")]
    pub tokens_per_sample: usize,
    pub seed: u64,
}

fn one() -> usize {
    1
}

pub fn synthetic_dataset(spec: &SyntheticCorpusSpec) -> Result<Dataset> {
    if spec.dim == 0 || spec.samples_per_class == 0 || spec.tokens_per_sample == 0 {
        return Err(EpisodeError::Synthetic("all counts must be >= 1".into()));
    }
    if spec.classes.contains(&0) {
        return Err(EpisodeError::Synthetic("every split needs a class".into()));
    }
    let signal = spec.signal_dims.unwrap_or(spec.dim).min(spec.dim);
    let noise = Normal::new(0.0, spec.intra_class_stddev)
        .map_err(|e| EpisodeError::Synthetic(e.to_string()))?;
    if !(spec.intra_class_stddev > 0.0) {
        return Err(EpisodeError::Synthetic("stddev must be > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let total: usize = spec.classes.iter().sum();
    let mut centers = draw_centers(total, spec.dim, spec.class_center_scale, &mut rng);
    centers
        .slice_mut(ndarray::s![.., signal..])
        .fill(0.0);

    let mut corpora = Vec::with_capacity(3);
    let mut next = 0;
    for (split, &count) in [Split::Train, Split::Valid, Split::Test]
        .iter()
        .zip(&spec.classes)
    {
        let mut samples = Vec::with_capacity(count * spec.samples_per_class);
        let mut label_vectors = BTreeMap::new();
        for c in next..next + count {
            let label = format!("{split}-{c:03}");
            let center = centers.row(c);
            for i in 0..spec.samples_per_class {
                let vectors = Array2::from_shape_fn((spec.tokens_per_sample, spec.dim), |(_, j)| {
                    center[j] + noise.sample(&mut rng)
                });
                let tokens = vec!["x".to_owned(); spec.tokens_per_sample];
                samples.push(TokenSequence::new(tokens, vectors, label.clone(), format!("{label}-{i}"))?);
            }
            label_vectors.insert(label, center.to_owned());
        }
        next += count;
        corpora.push(LabeledCorpus::new(*split, samples, label_vectors)?);
    }
    let test = corpora.pop().expect("three corpora");
    let valid = corpora.pop().expect("three corpora");
    let train = corpora.pop().expect("three corpora");
    Ok(Dataset {
        train,
        valid,
        test,
        report: LoadReport::default(),
    })
}
