//! Label-conditioned attention adapter.
//!
//! Each sample is encoded as the sequence `[h0, h1..hn, u1..uN]` where `h0`
//! is a prefix (the mean of the sentence's token vectors), `h1..hn` are the
//! token vectors and `u1..uN` are the episode's label-name vectors. A
//! multi-head self-attention block runs over the sequence and the output at
//! position 0 is the sample representation. Only that position is computed:
//! the outputs at the other positions are discarded.

use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::episodes::Episode;
use crate::wordrep::TokenSequence;

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("label_adapter: embedding width {dim} is not divisible by {heads} heads")]
    HeadSplit { dim: usize, heads: usize },
    #[error("label_adapter: invalid configuration: {0}")]
    Config(String),
    #[error("label_adapter: input width {found} does not match adapter width {expected}")]
    Shape { expected: usize, found: usize },
    #[error("label_adapter: non-finite value in head {head}")]
    NonFinite { head: usize },
    #[error("label_adapter: non-finite value in output projection")]
    NonFiniteOutput,
    #[error("label_adapter: cache does not match parameters ({0})")]
    Consistency(String),
    #[error("label_adapter: checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, AdapterError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub dim: usize,
    pub heads: usize,
    pub dropout_rate: f64,
    pub use_scaling: bool,
    pub identity_init: bool,
    pub residual: bool,
    pub layer_norm: bool,
}

impl AdapterConfig {
    pub fn new(dim: usize) -> Self {
        AdapterConfig {
            dim,
            heads: 4,
            dropout_rate: 0.1,
            use_scaling: true,
            identity_init: true,
            residual: false,
            layer_norm: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 {
            return Err(AdapterError::Config("dim and heads must be positive".into()));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(AdapterError::HeadSplit {
                dim: self.dim,
                heads: self.heads,
            });
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(AdapterError::Config(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// The adapter's weight matrices. Also used for gradients and optimizer
/// moments, which share the exact same shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrices {
    /// Per-head query projections, `dim × head_dim`.
    pub query: Vec<Array2<f64>>,
    pub key: Vec<Array2<f64>>,
    pub value: Vec<Array2<f64>>,
    /// `dim × dim`, applied to the concatenated head outputs.
    pub output: Array2<f64>,
}

impl Matrices {
    pub fn zeros(dim: usize, heads: usize) -> Self {
        let dh = dim / heads;
        let per_head = || vec![Array2::zeros((dim, dh)); heads];
        Matrices {
            query: per_head(),
            key: per_head(),
            value: per_head(),
            output: Array2::zeros((dim, dim)),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Matrices {
            query: self.query.iter().map(|m| Array2::zeros(m.raw_dim())).collect(),
            key: self.key.iter().map(|m| Array2::zeros(m.raw_dim())).collect(),
            value: self.value.iter().map(|m| Array2::zeros(m.raw_dim())).collect(),
            output: Array2::zeros(self.output.raw_dim()),
        }
    }

    /// Named matrices in a fixed order: `query.h`, `key.h`, `value.h` for
    /// every head, then `output`.
    pub fn named(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = Vec::with_capacity(3 * self.query.len() + 1);
        for (prefix, mats) in [("query", &self.query), ("key", &self.key), ("value", &self.value)] {
            for (h, m) in mats.iter().enumerate() {
                out.push((format!("{prefix}.{h}"), m));
            }
        }
        out.push(("output".to_owned(), &self.output));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Array2<f64>)> {
        let mut out = Vec::with_capacity(3 * self.query.len() + 1);
        for (prefix, mats) in [
            ("query", &mut self.query),
            ("key", &mut self.key),
            ("value", &mut self.value),
        ] {
            for (h, m) in mats.iter_mut().enumerate() {
                out.push((format!("{prefix}.{h}"), m));
            }
        }
        out.push(("output".to_owned(), &mut self.output));
        out
    }

    pub fn add_assign(&mut self, other: &Matrices) {
        for ((_, a), (_, b)) in self.named_mut().into_iter().zip(other.named()) {
            *a += b;
        }
    }

    pub fn num_elements(&self) -> usize {
        self.named().iter().map(|(_, m)| m.len()).sum()
    }

    /// Element `index` of the flattened parameter vector (matrix order of
    /// [`Matrices::named`], row-major within a matrix).
    pub fn flat_get(&self, mut index: usize) -> f64 {
        for (_, m) in self.named() {
            if index < m.len() {
                return m[(index / m.ncols(), index % m.ncols())];
            }
            index -= m.len();
        }
        panic!("flat index out of range");
    }

    pub fn flat_set(&mut self, mut index: usize, value: f64) {
        for (_, m) in self.named_mut() {
            if index < m.len() {
                let cols = m.ncols();
                m[(index / cols, index % cols)] = value;
                return;
            }
            index -= m.len();
        }
        panic!("flat index out of range");
    }

    pub fn max_abs(&self) -> f64 {
        self.named()
            .iter()
            .flat_map(|(_, m)| m.iter())
            .fold(0.0f64, |acc, x| acc.max(x.abs()))
    }
}

/// Trainable adapter parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    pub config: AdapterConfig,
    pub weights: Matrices,
}

impl AdapterParams {
    /// Identity-partitioned projections when `config.identity_init`, else
    /// Gaussian entries with standard deviation `1/sqrt(dim)`.
    pub fn init<R: Rng + ?Sized>(config: AdapterConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if config.identity_init {
            return Ok(Self::identity(config));
        }
        let (d, dh) = (config.dim, config.head_dim());
        let normal = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("positive stddev");
        let mut draw = |rows, cols| Array2::from_shape_simple_fn((rows, cols), || normal.sample(rng));
        let mut weights = Matrices::zeros(d, config.heads);
        for h in 0..config.heads {
            weights.query[h] = draw(d, dh);
            weights.key[h] = draw(d, dh);
            weights.value[h] = draw(d, dh);
        }
        weights.output = draw(d, d);
        Ok(AdapterParams { config, weights })
    }

    pub fn seeded(config: AdapterConfig, seed: u64) -> Result<Self> {
        Self::init(config, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn identity(config: AdapterConfig) -> Self {
        let (d, dh) = (config.dim, config.head_dim());
        let eye = Array2::<f64>::eye(d);
        let mut weights = Matrices::zeros(d, config.heads);
        for h in 0..config.heads {
            let block = eye.slice(s![.., h * dh..(h + 1) * dh]).to_owned();
            weights.query[h] = block.clone();
            weights.key[h] = block.clone();
            weights.value[h] = block;
        }
        weights.output = eye;
        AdapterParams { config, weights }
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    fn check_shapes(&self) -> Result<()> {
        let (d, dh, heads) = (self.config.dim, self.config.head_dim(), self.config.heads);
        let ok = self.weights.query.len() == heads
            && self.weights.key.len() == heads
            && self.weights.value.len() == heads
            && self.weights.named().iter().all(|(name, m)| {
                if name == "output" {
                    m.dim() == (d, d)
                } else {
                    m.dim() == (d, dh)
                }
            });
        if ok {
            Ok(())
        } else {
            Err(AdapterError::Config("weight shapes do not match dim/heads".into()))
        }
    }
}

/// `[h0, h1..hn, u1..uN]` for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterInput {
    pub prefix: Array1<f64>,
    /// `n × dim`.
    pub sentence: Array2<f64>,
    /// `N × dim`.
    pub labels: Array2<f64>,
}

impl AdapterInput {
    pub fn new(sequence: &TokenSequence, labels: &Array2<f64>) -> Self {
        AdapterInput {
            prefix: init_prefix(sequence),
            sentence: sequence.vectors.clone(),
            labels: labels.clone(),
        }
    }

    pub fn dim(&self) -> usize {
        self.prefix.len()
    }

    pub fn len(&self) -> usize {
        1 + self.sentence.nrows() + self.labels.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn stacked(&self) -> Array2<f64> {
        let mut x = Array2::zeros((self.len(), self.dim()));
        x.row_mut(0).assign(&self.prefix);
        let n = self.sentence.nrows();
        x.slice_mut(s![1..=n, ..]).assign(&self.sentence);
        x.slice_mut(s![n + 1.., ..]).assign(&self.labels);
        x
    }

    fn validate(&self, dim: usize) -> Result<()> {
        for found in [self.prefix.len(), self.sentence.ncols(), self.labels.ncols()] {
            if found != dim {
                return Err(AdapterError::Shape {
                    expected: dim,
                    found,
                });
            }
        }
        if self.sentence.nrows() == 0 || self.labels.nrows() == 0 {
            return Err(AdapterError::Config(
                "need at least one sentence vector and one label vector".into(),
            ));
        }
        Ok(())
    }
}

/// Mean of the sentence's token vectors.
pub fn init_prefix(sequence: &TokenSequence) -> Array1<f64> {
    sequence.mean_vector()
}

#[derive(Debug, Clone)]
struct HeadCache {
    query0: Array1<f64>,
    keys: Array2<f64>,
    values: Array2<f64>,
    /// Softmax attention weights of position 0.
    weights: Array1<f64>,
    /// Dropout multipliers (0 or 1/(1-p)); all ones outside training.
    mask: Array1<f64>,
}

/// Intermediates of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    dim: usize,
    heads: usize,
    sentence_len: usize,
    stacked: Array2<f64>,
    per_head: Vec<HeadCache>,
    concat: Array1<f64>,
    /// `(normalized output, 1/sigma)` when layer normalization is on.
    norm: Option<(Array1<f64>, f64)>,
}

impl ForwardCache {
    /// Attention weights of position 0 for `head` (before dropout).
    pub fn attention_weights(&self, head: usize) -> ArrayView1<'_, f64> {
        self.per_head[head].weights.view()
    }

    pub fn sequence(&self) -> ArrayView2<'_, f64> {
        self.stacked.view()
    }
}

pub fn adapter_forward<R: Rng + ?Sized>(
    params: &AdapterParams,
    input: &AdapterInput,
    train_mode: bool,
    rng: Option<&mut R>,
) -> Result<(Array1<f64>, ForwardCache)> {
    let cfg = &params.config;
    cfg.validate()?;
    params.check_shapes()?;
    input.validate(cfg.dim)?;
    let dropout = train_mode && cfg.dropout_rate > 0.0;
    let mut rng = match (dropout, rng) {
        (true, None) => {
            return Err(AdapterError::Config(
                "dropout in train mode needs a random generator".into(),
            ))
        }
        (_, r) => r,
    };

    let x = input.stacked();
    let len = x.nrows();
    let dh = cfg.head_dim();
    let scale = if cfg.use_scaling {
        1.0 / (dh as f64).sqrt()
    } else {
        1.0
    };
    let keep = 1.0 - cfg.dropout_rate;
    let mut concat = Array1::zeros(cfg.dim);
    let mut per_head = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let query0 = x.row(0).dot(&params.weights.query[h]);
        let keys = x.dot(&params.weights.key[h]);
        let values = x.dot(&params.weights.value[h]);
        let scores = keys.dot(&query0) * scale;
        if scores.iter().any(|v| !v.is_finite()) {
            return Err(AdapterError::NonFinite { head: h });
        }
        let weights = softmax(scores.view());
        let mask = if dropout {
            let rng = rng.as_deref_mut().expect("checked above");
            Array1::from_shape_fn(len, |_| {
                if rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
        } else {
            Array1::ones(len)
        };
        let out = (&weights * &mask).dot(&values);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(AdapterError::NonFinite { head: h });
        }
        concat.slice_mut(s![h * dh..(h + 1) * dh]).assign(&out);
        per_head.push(HeadCache {
            query0,
            keys,
            values,
            weights,
            mask,
        });
    }

    let mut out = concat.dot(&params.weights.output);
    if cfg.residual {
        out += &x.row(0);
    }
    let norm = if cfg.layer_norm {
        let mean = out.mean().expect("dim >= 1");
        let centered = &out - mean;
        let var = centered.dot(&centered) / cfg.dim as f64;
        let inv_sigma = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        out = centered * inv_sigma;
        Some((out.clone(), inv_sigma))
    } else {
        None
    };
    if out.iter().any(|v| !v.is_finite()) {
        return Err(AdapterError::NonFiniteOutput);
    }
    let cache = ForwardCache {
        dim: cfg.dim,
        heads: cfg.heads,
        sentence_len: input.sentence.nrows(),
        stacked: x,
        per_head,
        concat,
        norm,
    };
    Ok((out, cache))
}

fn softmax(scores: ArrayView1<'_, f64>) -> Array1<f64> {
    let max = scores.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut e = scores.mapv(|s| (s - max).exp());
    let total = e.sum();
    e /= total;
    e
}

/// Gradients of `upstream · v` with respect to the parameters and every
/// input vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGradients {
    pub params: Matrices,
    pub prefix: Array1<f64>,
    pub sentence: Array2<f64>,
    pub labels: Array2<f64>,
}

pub fn adapter_backward(
    params: &AdapterParams,
    cache: &ForwardCache,
    upstream: ArrayView1<'_, f64>,
) -> Result<AdapterGradients> {
    let cfg = &params.config;
    if cache.dim != cfg.dim || cache.heads != cfg.heads {
        return Err(AdapterError::Consistency(format!(
            "cache has dim {} / {} heads, params have dim {} / {} heads",
            cache.dim, cache.heads, cfg.dim, cfg.heads
        )));
    }
    if upstream.len() != cfg.dim {
        return Err(AdapterError::Shape {
            expected: cfg.dim,
            found: upstream.len(),
        });
    }
    let d = cfg.dim;
    let dh = cfg.head_dim();
    let scale = if cfg.use_scaling {
        1.0 / (dh as f64).sqrt()
    } else {
        1.0
    };

    let grad_out = match &cache.norm {
        Some((y, inv_sigma)) => {
            let mean_g = upstream.mean().expect("dim >= 1");
            let mean_gy = upstream.dot(y) / d as f64;
            (&upstream - mean_g - y * mean_gy) * *inv_sigma
        }
        None => upstream.to_owned(),
    };

    let x = &cache.stacked;
    let mut grads = Matrices::zeros(d, cfg.heads);
    let mut grad_x = Array2::<f64>::zeros(x.raw_dim());
    if cfg.residual {
        grad_x.row_mut(0).scaled_add(1.0, &grad_out);
    }
    grads.output = outer(cache.concat.view(), grad_out.view());
    let grad_concat = params.weights.output.dot(&grad_out);

    for (h, hc) in cache.per_head.iter().enumerate() {
        let grad_head = grad_concat.slice(s![h * dh..(h + 1) * dh]);
        let kept = &hc.weights * &hc.mask;
        // out_h = kept^T V
        let grad_values = outer(kept.view(), grad_head);
        let grad_kept = hc.values.dot(&grad_head);
        let grad_weights = &grad_kept * &hc.mask;
        let inner = hc.weights.dot(&grad_weights);
        let grad_scores = &hc.weights * &(grad_weights - inner);
        // scores_j = scale * q0 . k_j
        let grad_query0 = hc.keys.t().dot(&grad_scores) * scale;
        let grad_keys = outer(grad_scores.view(), hc.query0.view()) * scale;

        grads.query[h] = outer(x.row(0), grad_query0.view());
        grads.key[h] = x.t().dot(&grad_keys);
        grads.value[h] = x.t().dot(&grad_values);

        grad_x += &grad_keys.dot(&params.weights.key[h].t());
        grad_x += &grad_values.dot(&params.weights.value[h].t());
        let grad_x0 = params.weights.query[h].dot(&grad_query0);
        grad_x.row_mut(0).scaled_add(1.0, &grad_x0);
    }

    let n = cache.sentence_len;
    Ok(AdapterGradients {
        params: grads,
        prefix: grad_x.row(0).to_owned(),
        sentence: grad_x.slice(s![1..=n, ..]).to_owned(),
        labels: grad_x.slice(s![n + 1.., ..]).to_owned(),
    })
}

fn outer(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> Array2<f64> {
    let a2 = a.insert_axis(Axis(1));
    let b2 = b.insert_axis(Axis(0));
    a2.dot(&b2)
}

/// Representations of every sample in an episode.
#[derive(Debug, Clone)]
pub struct EpisodeReps {
    /// `support[c]` is `K × dim`.
    pub support: Vec<Array2<f64>>,
    /// `M·N × dim`, in sampler order.
    pub query: Array2<f64>,
    /// Present unless the adapter was bypassed.
    pub caches: Option<EpisodeCaches>,
}

#[derive(Debug, Clone)]
pub struct EpisodeCaches {
    pub support: Vec<Vec<ForwardCache>>,
    pub query: Vec<ForwardCache>,
}

/// Runs every support and query sample of `episode` through the adapter with
/// the episode's label vectors appended. `params = None` bypasses the
/// adapter: each representation is then the mean of its token vectors.
pub fn represent_episode<R: Rng + ?Sized>(
    params: Option<&AdapterParams>,
    episode: &Episode,
    train_mode: bool,
    rng: &mut R,
) -> Result<EpisodeReps> {
    let dim = episode.dim();
    let labels = &episode.label_names.vectors;
    let mut encode = |seq: &TokenSequence| -> Result<(Array1<f64>, Option<ForwardCache>)> {
        if seq.dim() != dim {
            return Err(AdapterError::Shape {
                expected: dim,
                found: seq.dim(),
            });
        }
        match params {
            None => Ok((init_prefix(seq), None)),
            Some(p) => {
                let input = AdapterInput::new(seq, labels);
                let (v, cache) = adapter_forward(p, &input, train_mode, Some(&mut *rng))?;
                Ok((v, Some(cache)))
            }
        }
    };

    let mut support = Vec::with_capacity(episode.support.len());
    let mut support_caches = Vec::with_capacity(episode.support.len());
    for class in &episode.support {
        let mut reps = Array2::zeros((class.len(), dim));
        let mut caches = Vec::new();
        for (i, seq) in class.iter().enumerate() {
            let (v, cache) = encode(seq)?;
            reps.row_mut(i).assign(&v);
            caches.extend(cache);
        }
        support.push(reps);
        support_caches.push(caches);
    }
    let mut query = Array2::zeros((episode.query.len(), dim));
    let mut query_caches = Vec::new();
    for (i, seq) in episode.query.iter().enumerate() {
        let (v, cache) = encode(seq)?;
        query.row_mut(i).assign(&v);
        query_caches.extend(cache);
    }
    let caches = params.map(|_| EpisodeCaches {
        support: support_caches,
        query: query_caches,
    });
    Ok(EpisodeReps {
        support,
        query,
        caches,
    })
}

/// On-disk parameter format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsFile {
    pub dim: usize,
    pub heads: usize,
    pub use_scaling: bool,
    pub matrices: BTreeMap<String, Vec<Vec<f64>>>,
    #[serde(default)]
    pub dropout_rate: f64,
    #[serde(default)]
    pub identity_init: bool,
    #[serde(default)]
    pub residual: bool,
    #[serde(default)]
    pub layer_norm: bool,
}

impl From<&AdapterParams> for ParamsFile {
    fn from(p: &AdapterParams) -> Self {
        let matrices = p
            .weights
            .named()
            .into_iter()
            .map(|(name, m)| (name, m.rows().into_iter().map(|r| r.to_vec()).collect()))
            .collect();
        ParamsFile {
            dim: p.config.dim,
            heads: p.config.heads,
            use_scaling: p.config.use_scaling,
            matrices,
            dropout_rate: p.config.dropout_rate,
            identity_init: p.config.identity_init,
            residual: p.config.residual,
            layer_norm: p.config.layer_norm,
        }
    }
}

impl TryFrom<ParamsFile> for AdapterParams {
    type Error = AdapterError;

    fn try_from(file: ParamsFile) -> Result<Self> {
        let config = AdapterConfig {
            dim: file.dim,
            heads: file.heads,
            dropout_rate: file.dropout_rate,
            use_scaling: file.use_scaling,
            identity_init: file.identity_init,
            residual: file.residual,
            layer_norm: file.layer_norm,
        };
        config.validate()?;
        let mut weights = Matrices::zeros(config.dim, config.heads);
        let expected = weights.named().len();
        if file.matrices.len() != expected {
            return Err(AdapterError::Checkpoint(format!(
                "expected {expected} matrices, found {}",
                file.matrices.len()
            )));
        }
        for (name, slot) in weights.named_mut() {
            let rows = file
                .matrices
                .get(&name)
                .ok_or_else(|| AdapterError::Checkpoint(format!("missing matrix {name:?}")))?;
            let (r, c) = slot.dim();
            if rows.len() != r || rows.iter().any(|row| row.len() != c) {
                return Err(AdapterError::Checkpoint(format!(
                    "matrix {name:?} is not {r}×{c}"
                )));
            }
            for (i, row) in rows.iter().enumerate() {
                for (j, &v) in row.iter().enumerate() {
                    if !v.is_finite() {
                        return Err(AdapterError::Checkpoint(format!(
                            "matrix {name:?} has a non-finite entry"
                        )));
                    }
                    slot[[i, j]] = v;
                }
            }
        }
        Ok(AdapterParams { config, weights })
    }
}
