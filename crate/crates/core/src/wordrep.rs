//! Word representation layer: frozen embedding tables, tokenization and the
//! mapping from sentences and label names to token-vector sequences.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of random unit vectors backing the hash-bucket OOV policy.
pub const HASH_BUCKETS: usize = 1024;

#[derive(Debug, Error)]
pub enum WordRepError {
    #[error("wordrep: cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("wordrep: {msg} at line {line}")]
    Format { line: usize, msg: String },
    #[error("wordrep: empty sequence after tokenization and OOV handling")]
    EmptySequence,
    #[error("wordrep: label {label:?} has no representable token")]
    LabelEmbedding { label: String },
    #[error("wordrep: vector width {found} does not match table width {expected}")]
    Width { expected: usize, found: usize },
}

pub type Result<T> = std::result::Result<T, WordRepError>;

/// What to do with tokens that are missing from the table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OovPolicy {
    /// Drop unknown tokens.
    #[default]
    Skip,
    /// Substitute the zero vector.
    Zero,
    /// Map each unknown word to one of [`HASH_BUCKETS`] seeded random unit vectors.
    HashBucket,
}

impl std::str::FromStr for OovPolicy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "skip" => Ok(OovPolicy::Skip),
            "zero" => Ok(OovPolicy::Zero),
            "hash-bucket" => Ok(OovPolicy::HashBucket),
            other => Err(format!("unknown OOV policy {other:?}")),
        }
    }
}

/// A frozen word → vector table.
#[derive(Debug, Clone)]
pub struct WordVectorTable {
    dim: usize,
    index: HashMap<String, usize>,
    vectors: Array2<f64>,
    oov_policy: OovPolicy,
    buckets: Option<Array2<f64>>,
}

impl WordVectorTable {
    /// Builds a table from `(word, vector)` pairs. Later duplicates replace earlier ones.
    pub fn from_entries<I, S>(dim: usize, entries: I, oov_policy: OovPolicy) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Vec<f64>)>,
        S: Into<String>,
    {
        if dim == 0 {
            return Err(WordRepError::Format {
                line: 1,
                msg: "embedding width must be positive".into(),
            });
        }
        let mut index = HashMap::new();
        let mut rows: Vec<f64> = Vec::new();
        for (word, vector) in entries {
            if vector.len() != dim {
                return Err(WordRepError::Width {
                    expected: dim,
                    found: vector.len(),
                });
            }
            insert_row(&mut index, &mut rows, dim, word.into(), &vector);
        }
        Ok(Self::assemble(dim, index, rows, oov_policy))
    }

    fn assemble(
        dim: usize,
        index: HashMap<String, usize>,
        rows: Vec<f64>,
        oov_policy: OovPolicy,
    ) -> Self {
        let n = rows.len() / dim;
        let vectors = Array2::from_shape_vec((n, dim), rows).expect("row buffer is n*dim");
        let buckets = (oov_policy == OovPolicy::HashBucket).then(|| hash_bucket_vectors(dim, 0));
        WordVectorTable {
            dim,
            index,
            vectors,
            oov_policy,
            buckets,
        }
    }

    /// Reseeds the hash-bucket vectors. No effect under other policies.
    pub fn with_bucket_seed(mut self, seed: u64) -> Self {
        if self.oov_policy == OovPolicy::HashBucket {
            self.buckets = Some(hash_bucket_vectors(self.dim, seed));
        }
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn oov_policy(&self) -> OovPolicy {
        self.oov_policy
    }

    /// Stored vector for `word`, ignoring the OOV policy.
    pub fn lookup(&self, word: &str) -> Option<ArrayView1<'_, f64>> {
        self.index.get(word).map(|&row| self.vectors.row(row))
    }

    /// Vector for `word` after applying the OOV policy; `None` means "drop".
    pub fn resolve(&self, word: &str) -> Option<Array1<f64>> {
        if let Some(v) = self.lookup(word) {
            return Some(v.to_owned());
        }
        match self.oov_policy {
            OovPolicy::Skip => None,
            OovPolicy::Zero => Some(Array1::zeros(self.dim)),
            OovPolicy::HashBucket => {
                let buckets = self.buckets.as_ref().expect("buckets built for hash policy");
                let row = (fnv1a(word.as_bytes()) % HASH_BUCKETS as u64) as usize;
                Some(buckets.row(row).to_owned())
            }
        }
    }
}

fn insert_row(
    index: &mut HashMap<String, usize>,
    rows: &mut Vec<f64>,
    dim: usize,
    word: String,
    vector: &[f64],
) {
    match index.get(&word) {
        Some(&row) => rows[row * dim..(row + 1) * dim].copy_from_slice(vector),
        None => {
            index.insert(word, rows.len() / dim);
            rows.extend_from_slice(vector);
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn hash_bucket_vectors(dim: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6f6f_765f_6275_636b);
    let mut out = Array2::zeros((HASH_BUCKETS, dim));
    for mut row in out.rows_mut() {
        loop {
            row.mapv_inplace(|_: f64| -> f64 { StandardNormal.sample(&mut rng) });
            let norm = row.dot(&row).sqrt();
            if norm > 1e-12 {
                row /= norm;
                break;
            }
        }
    }
    out
}

/// Reads a word2vec-style text file: a `<count> <dim>` header followed by
/// `<word> <dim floats>` lines.
pub fn load_word_vectors(path: impl AsRef<Path>, oov_policy: OovPolicy) -> Result<WordVectorTable> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| WordRepError::Io {
        path: path.to_owned(),
        source,
    })?;
    read_word_vectors(BufReader::new(file), oov_policy).map_err(|e| match e {
        WordRepError::Io { source, .. } => WordRepError::Io {
            path: path.to_owned(),
            source,
        },
        other => other,
    })
}

pub fn read_word_vectors(reader: impl BufRead, oov_policy: OovPolicy) -> Result<WordVectorTable> {
    let mut lines = reader.lines();
    let io_err = |source| WordRepError::Io {
        path: PathBuf::new(),
        source,
    };
    let header = match lines.next() {
        Some(line) => line.map_err(io_err)?,
        None => {
            return Err(WordRepError::Format {
                line: 1,
                msg: "missing header".into(),
            })
        }
    };
    let malformed = || WordRepError::Format {
        line: 1,
        msg: "malformed header".into(),
    };
    let mut fields = header.split_whitespace();
    let count: usize = fields.next().and_then(|f| f.parse().ok()).ok_or_else(malformed)?;
    let dim: usize = fields.next().and_then(|f| f.parse().ok()).ok_or_else(malformed)?;
    if fields.next().is_some() || dim == 0 {
        return Err(malformed());
    }

    let mut index = HashMap::with_capacity(count);
    let mut rows = Vec::with_capacity(count * dim);
    let mut vector = Vec::with_capacity(dim);
    let mut seen = 0;
    for (offset, line) in lines.enumerate() {
        let line_no = offset + 2;
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        if seen == count {
            return Err(WordRepError::Format {
                line: line_no,
                msg: format!("more than {count} vectors"),
            });
        }
        let mut fields = line.split_whitespace();
        let word = fields.next().expect("non-empty line has a field");
        vector.clear();
        for field in fields {
            let value: f64 = field.parse().map_err(|_| WordRepError::Format {
                line: line_no,
                msg: format!("unreadable float {field:?}"),
            })?;
            vector.push(value);
        }
        if vector.len() != dim {
            return Err(WordRepError::Format {
                line: line_no,
                msg: "inconsistent vector width".into(),
            });
        }
        insert_row(&mut index, &mut rows, dim, word.to_owned(), &vector);
        seen += 1;
    }
    if seen != count {
        return Err(WordRepError::Format {
            line: seen + 2,
            msg: format!("expected {count} vectors, found {seen}"),
        });
    }
    Ok(WordVectorTable::assemble(dim, index, rows, oov_policy))
}

/// Lowercases, splits on whitespace and strips non-alphanumeric characters
/// from both ends of every token.
pub fn tokenize(text: &str) -> Result<Vec<String>> {
    let tokens: Vec<String> = text
        .split_whitespace()
        .map(|raw| {
            raw.trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase()
        })
        .filter(|t| !t.is_empty())
        .collect();
    if tokens.is_empty() {
        return Err(WordRepError::EmptySequence);
    }
    Ok(tokens)
}

/// One sentence as a sequence of token vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: Vec<String>,
    /// `tokens.len() × dim`, one row per token.
    pub vectors: Array2<f64>,
    pub label: String,
    pub source_id: String,
}

impl TokenSequence {
    pub fn new(
        tokens: Vec<String>,
        vectors: Array2<f64>,
        label: impl Into<String>,
        source_id: impl Into<String>,
    ) -> Result<Self> {
        if vectors.nrows() == 0 {
            return Err(WordRepError::EmptySequence);
        }
        if tokens.len() != vectors.nrows() {
            return Err(WordRepError::Format {
                line: 0,
                msg: format!(
                    "{} tokens but {} vectors",
                    tokens.len(),
                    vectors.nrows()
                ),
            });
        }
        Ok(TokenSequence {
            tokens,
            vectors,
            label: label.into(),
            source_id: source_id.into(),
        })
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.nrows() == 0
    }

    /// Mean of the token vectors.
    pub fn mean_vector(&self) -> Array1<f64> {
        self.vectors
            .mean_axis(Axis(0))
            .expect("sequence is non-empty")
    }
}

pub fn embed_sequence(
    table: &WordVectorTable,
    tokens: &[String],
    label: &str,
    source_id: &str,
) -> Result<TokenSequence> {
    let mut kept = Vec::with_capacity(tokens.len());
    let mut rows = Vec::with_capacity(tokens.len() * table.dim());
    for token in tokens {
        if let Some(v) = table.resolve(token) {
            kept.push(token.clone());
            rows.extend(v.iter());
        }
    }
    if kept.is_empty() {
        return Err(WordRepError::EmptySequence);
    }
    let vectors = Array2::from_shape_vec((kept.len(), table.dim()), rows)
        .expect("row buffer is len*dim");
    TokenSequence::new(kept, vectors, label, source_id)
}

/// Label names of one episode and their vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelNameVectors {
    pub names: Vec<String>,
    /// `names.len() × dim`.
    pub vectors: Array2<f64>,
}

impl LabelNameVectors {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn from_rows(names: Vec<String>, rows: &[Array1<f64>]) -> Self {
        let dim = rows.first().map_or(0, |r| r.len());
        let mut vectors = Array2::zeros((rows.len(), dim));
        for (mut dst, src) in vectors.rows_mut().into_iter().zip(rows) {
            dst.assign(src);
        }
        LabelNameVectors { names, vectors }
    }
}

/// Embeds a label name as the mean of its token vectors.
pub fn embed_label_name(table: &WordVectorTable, name: &str) -> Result<Array1<f64>> {
    let label_err = || WordRepError::LabelEmbedding {
        label: name.to_owned(),
    };
    let tokens = tokenize(name).map_err(|_| label_err())?;
    let seq = embed_sequence(table, &tokens, name, name).map_err(|_| label_err())?;
    Ok(seq.mean_vector())
}

pub fn embed_label_names(table: &WordVectorTable, names: &[String]) -> Result<LabelNameVectors> {
    let rows = names
        .iter()
        .map(|n| embed_label_name(table, n))
        .collect::<Result<Vec<_>>>()?;
    let mut out = LabelNameVectors::from_rows(names.to_vec(), &rows);
    if out.vectors.ncols() == 0 {
        out.vectors = Array2::zeros((0, table.dim()));
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PrecomputedRecord {
    pub id: String,
    pub label: String,
    pub tokens: Vec<String>,
    pub vectors: Vec<Vec<f64>>,
}

impl From<&TokenSequence> for PrecomputedRecord {
    fn from(seq: &TokenSequence) -> Self {
        PrecomputedRecord {
            id: seq.source_id.clone(),
            label: seq.label.clone(),
            tokens: seq.tokens.clone(),
            vectors: seq.vectors.rows().into_iter().map(|r| r.to_vec()).collect(),
        }
    }
}

/// Reads the precomputed JSONL format: one
/// `{"id", "label", "tokens", "vectors"}` object per line.
pub fn load_precomputed(path: impl AsRef<Path>) -> Result<Vec<TokenSequence>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| WordRepError::Io {
        path: path.to_owned(),
        source,
    })?;
    read_precomputed(BufReader::new(file)).map_err(|e| match e {
        WordRepError::Io { source, .. } => WordRepError::Io {
            path: path.to_owned(),
            source,
        },
        other => other,
    })
}

pub fn read_precomputed(reader: impl BufRead) -> Result<Vec<TokenSequence>> {
    let mut out = Vec::new();
    let mut dim: Option<usize> = None;
    for (offset, line) in reader.lines().enumerate() {
        let line_no = offset + 1;
        let line = line.map_err(|source| WordRepError::Io {
            path: PathBuf::new(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: PrecomputedRecord =
            serde_json::from_str(&line).map_err(|e| WordRepError::Format {
                line: line_no,
                msg: format!("invalid record: {e}"),
            })?;
        out.push(record_to_sequence(record, &mut dim, line_no)?);
    }
    Ok(out)
}

pub(crate) fn record_to_sequence(
    record: PrecomputedRecord,
    dim: &mut Option<usize>,
    line: usize,
) -> Result<TokenSequence> {
    let format = |msg: String| WordRepError::Format { line, msg };
    if record.vectors.is_empty() {
        return Err(format("record has no vectors".into()));
    }
    if record.vectors.len() != record.tokens.len() {
        return Err(format(format!(
            "{} tokens but {} vectors",
            record.tokens.len(),
            record.vectors.len()
        )));
    }
    let width = *dim.get_or_insert(record.vectors[0].len());
    if width == 0 {
        return Err(format("zero-width vectors".into()));
    }
    if record.vectors.iter().any(|v| v.len() != width) {
        return Err(format(format!("vector width differs from {width}")));
    }
    let flat: Vec<f64> = record.vectors.into_iter().flatten().collect();
    let vectors = Array2::from_shape_vec((record.tokens.len(), width), flat)
        .expect("widths checked above");
    TokenSequence::new(record.tokens, vectors, record.label, record.id)
}
