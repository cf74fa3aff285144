//! Episodic training and evaluation.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::episodes::{sample_episode_seeded, Dataset, Episode, EpisodeError, LabeledCorpus};
use crate::label_adapter::{
    adapter_backward, represent_episode, AdapterConfig, AdapterError, AdapterParams, EpisodeReps,
    Matrices, ParamsFile,
};
use crate::protonet::{
    accuracy, class_posteriors, classifier_backward, cross_entropy, predict,
    support_mean_prototypes, ProtoError, PrototypeSet,
};
use crate::qda::{estimate_prototypes, QdaError, QdaSettings};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Two-sided 95% normal quantile.
const Z_95: f64 = 1.96;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Qda(#[from] QdaError),
    #[error(transparent)]
    Proto(#[from] ProtoError),
    #[error(transparent)]
    Episodes(#[from] EpisodeError),
    #[error("trainer: non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("trainer: invalid config: {0}")]
    Config(String),
    #[error("trainer: evaluation impossible: {0}")]
    Evaluation(String),
    #[error("trainer: {path}: {msg}")]
    Io { path: String, msg: String },
    #[error("trainer: training aborted in epoch {epoch}: {source}")]
    Aborted {
        epoch: usize,
        #[source]
        source: Box<TrainError>,
        /// Best parameters seen before the failure.
        partial: Box<Checkpoint>,
    },
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Run configuration. Field names are the JSON keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub m_query: usize,
    pub r: usize,
    pub epochs: usize,
    pub episodes_train: usize,
    pub episodes_val: usize,
    pub episodes_test: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub dropout: f64,
    pub patience: usize,
    pub seed: u64,
    /// Entropic strength relative to the mean transport cost.
    pub ot_epsilon: f64,
    pub ot_tol: f64,
    pub ot_max_iter: usize,
    /// Adapter width; inferred from the data when absent.
    pub dim: Option<usize>,
    pub heads: usize,
    pub use_scaling: bool,
    pub identity_init: bool,
    pub residual: bool,
    pub layer_norm: bool,
    pub bypass_adapter: bool,
    pub bypass_qda: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_way: 5,
            k_shot: 1,
            m_query: 25,
            r: 10,
            epochs: 100,
            episodes_train: 100,
            episodes_val: 100,
            episodes_test: 1000,
            learning_rate: 1e-3,
            warmup_steps: 100,
            weight_decay: 0.1,
            dropout: 0.1,
            patience: 20,
            seed: 0,
            ot_epsilon: 0.05,
            ot_tol: 1e-6,
            ot_max_iter: 1000,
            dim: None,
            heads: 4,
            use_scaling: true,
            identity_init: true,
            residual: false,
            layer_norm: false,
            bypass_adapter: false,
            bypass_qda: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_way", self.n_way),
            ("k_shot", self.k_shot),
            ("m_query", self.m_query),
            ("epochs", self.epochs),
            ("episodes_train", self.episodes_train),
            ("episodes_val", self.episodes_val),
            ("episodes_test", self.episodes_test),
            ("patience", self.patience),
            ("heads", self.heads),
            ("ot_max_iter", self.ot_max_iter),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(TrainError::Config(format!("{name} must be positive")));
        }
        if self.n_way < 2 {
            return Err(TrainError::Config("n_way must be at least 2".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(TrainError::Config("learning_rate must be positive".into()));
        }
        if !(self.ot_epsilon > 0.0) || !(self.ot_tol > 0.0) {
            return Err(TrainError::Config("ot_epsilon and ot_tol must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(TrainError::Config("weight_decay must be nonnegative".into()));
        }
        Ok(())
    }

    /// Whether prototypes use query augmentation.
    pub fn qda_enabled(&self) -> bool {
        !self.bypass_qda && self.r > 0
    }

    /// Short name of the ablation variant this config selects.
    pub fn variant(&self) -> &'static str {
        match (!self.bypass_adapter, self.qda_enabled()) {
            (true, true) => "full",
            (true, false) => "qda-off",
            (false, true) => "adapter-off",
            (false, false) => "pn",
        }
    }

    pub fn qda_settings(&self) -> QdaSettings {
        QdaSettings {
            r: self.r,
            epsilon: self.ot_epsilon,
            tol: self.ot_tol,
            max_iter: self.ot_max_iter,
        }
    }

    pub fn adapter_config(&self, dim: usize) -> AdapterConfig {
        AdapterConfig {
            dim,
            heads: self.heads,
            dropout_rate: self.dropout,
            use_scaling: self.use_scaling,
            identity_init: self.identity_init,
            residual: self.residual,
            layer_norm: self.layer_norm,
        }
    }
}

/// Mixes a run seed with a stream tag and an index (splitmix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ index.wrapping_mul(0xd1b5_4a32_d192_ed03);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const STREAM_INIT: u64 = 1;
const STREAM_TRAIN: u64 = 2;
const STREAM_VALID: u64 = 3;
const STREAM_TEST: u64 = 4;

/// Everything computed for one episode.
#[derive(Debug, Clone)]
pub struct EpisodeOutcome {
    pub loss: f64,
    pub accuracy: f64,
    pub predictions: Vec<usize>,
    pub prototypes: PrototypeSet,
    /// Per class, `prototype = coefficients · supports`.
    pub coefficients: Vec<Array1<f64>>,
    pub reps: EpisodeReps,
    /// Parameter gradients; only in train mode with the adapter active.
    pub gradients: Option<Matrices>,
}

fn check_arity(episode: &Episode, config: &TrainConfig) -> Result<()> {
    let ok = episode.n_way == config.n_way
        && episode.k_shot == config.k_shot
        && episode.m_query == config.m_query
        && episode.support.len() == config.n_way
        && episode.support.iter().all(|s| s.len() == config.k_shot)
        && episode.query.len() == config.n_way * config.m_query;
    if ok {
        Ok(())
    } else {
        Err(TrainError::Config(format!(
            "episode is {}-way {}-shot with {} queries, config wants {}-way {}-shot {}",
            episode.n_way,
            episode.k_shot,
            episode.query.len(),
            config.n_way,
            config.k_shot,
            config.m_query
        )))
    }
}

/// Prototypes for an episode's representations plus the per-class support
/// coefficients that produce them.
pub fn episode_prototypes(
    reps: &EpisodeReps,
    class_ids: &[String],
    config: &TrainConfig,
) -> Result<(PrototypeSet, Vec<Array1<f64>>)> {
    if config.qda_enabled() {
        let est = estimate_prototypes(&reps.support, reps.query.view(), class_ids, &config.qda_settings())?;
        let coefs = est.classes.iter().map(|a| a.support_coefficients()).collect();
        Ok((est.prototypes, coefs))
    } else {
        let protos = support_mean_prototypes(class_ids, &reps.support)?;
        let coefs = reps
            .support
            .iter()
            .map(|s| Array1::from_elem(s.nrows(), 1.0 / s.nrows() as f64))
            .collect();
        Ok((protos, coefs))
    }
}

/// Forward (and in train mode backward) pass over one episode. Transport
/// plans are constants for the backward pass: gradients reach the supports
/// through the fixed prototype coefficients.
pub fn episode_step<R: Rng + ?Sized>(
    params: &AdapterParams,
    episode: &Episode,
    config: &TrainConfig,
    rng: &mut R,
    train_mode: bool,
) -> Result<EpisodeOutcome> {
    check_arity(episode, config)?;
    let adapter = (!config.bypass_adapter).then_some(params);
    let reps = represent_episode(adapter, episode, train_mode, rng)?;
    let (prototypes, coefficients) = episode_prototypes(&reps, episode.class_names(), config)?;
    let posterior = class_posteriors(reps.query.view(), &prototypes)?;
    let loss = cross_entropy(&posterior, &episode.query_labels)?;
    let predictions = predict(reps.query.view(), &prototypes)?;
    let acc = accuracy(&predictions, &episode.query_labels);

    let gradients = match (&reps.caches, train_mode) {
        (Some(caches), true) => {
            let cls = classifier_backward(reps.query.view(), &prototypes, &episode.query_labels)?;
            let mut total = params.weights.zeros_like();
            for (c, class_caches) in caches.support.iter().enumerate() {
                let grad_proto = cls.prototypes.row(c);
                for (j, cache) in class_caches.iter().enumerate() {
                    let upstream = &grad_proto * coefficients[c][j];
                    total.add_assign(&adapter_backward(params, cache, upstream.view())?.params);
                }
            }
            for (i, cache) in caches.query.iter().enumerate() {
                total.add_assign(&adapter_backward(params, cache, cls.queries.row(i))?.params);
            }
            Some(total)
        }
        _ => None,
    };
    Ok(EpisodeOutcome {
        loss,
        accuracy: acc,
        predictions,
        prototypes,
        coefficients,
        reps,
        gradients,
    })
}

/// Eval-mode episode loss with prototype coefficients held fixed.
pub fn episode_loss_frozen(
    params: &AdapterParams,
    episode: &Episode,
    config: &TrainConfig,
    coefficients: &[Array1<f64>],
) -> Result<f64> {
    let adapter = (!config.bypass_adapter).then_some(params);
    let reps = represent_episode(adapter, episode, false, &mut ChaCha8Rng::seed_from_u64(0))?;
    let rows: Vec<Array1<f64>> = reps
        .support
        .iter()
        .zip(coefficients)
        .map(|(s, w)| w.dot(s))
        .collect();
    let views: Vec<ArrayView1<'_, f64>> = rows.iter().map(|r| r.view()).collect();
    let protos = PrototypeSet::from_rows(episode.class_names().to_vec(), &views)?;
    let posterior = class_posteriors(reps.query.view(), &protos)?;
    Ok(cross_entropy(&posterior, &episode.query_labels)?)
}

/// Adam moment accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub first: Matrices,
    pub second: Matrices,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &Matrices) -> Self {
        OptimizerState {
            first: params.zeros_like(),
            second: params.zeros_like(),
            step: 0,
        }
    }
}

/// One decoupled-weight-decay Adam update on flat buffers; `step` is the
/// 1-based step count used for bias correction.
pub fn adamw_update(
    params: &mut [f64],
    grads: &[f64],
    first: &mut [f64],
    second: &mut [f64],
    step: u64,
    lr: f64,
    weight_decay: f64,
) {
    let c1 = 1.0 - ADAM_BETA1.powf(step as f64);
    let c2 = 1.0 - ADAM_BETA2.powf(step as f64);
    let decay = 1.0 - lr * weight_decay;
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(first).zip(second) {
        *p *= decay;
        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}

pub fn adamw_step(
    params: &mut Matrices,
    grads: &Matrices,
    state: &mut OptimizerState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if lr < 0.0 {
        return Err(TrainError::Config("negative learning rate".into()));
    }
    for (name, g) in grads.named() {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(TrainError::NonFiniteGradient(name));
        }
    }
    state.step += 1;
    let step = state.step;
    let tensors = params
        .named_mut()
        .into_iter()
        .zip(grads.named())
        .zip(state.first.named_mut())
        .zip(state.second.named_mut());
    for ((((_, p), (_, g)), (_, m)), (_, v)) in tensors {
        adamw_update(
            p.as_slice_mut().expect("standard layout"),
            g.as_slice().expect("standard layout"),
            m.as_slice_mut().expect("standard layout"),
            v.as_slice_mut().expect("standard layout"),
            step,
            lr,
            weight_decay,
        );
    }
    Ok(())
}

/// Linear warmup from 0 to `base_lr` over `warmup_steps`, then constant.
pub fn lr_schedule(step: u64, warmup_steps: u64, base_lr: f64) -> f64 {
    if warmup_steps == 0 || step >= warmup_steps {
        base_lr
    } else {
        base_lr * step as f64 / warmup_steps as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Stops once validation accuracy has not improved for `patience` epochs.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<f64>,
    best_epoch: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            best_epoch: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, value: f64) -> StopDecision {
        if self.best.is_none_or(|b| value > b) {
            self.best = Some(value);
            self.best_epoch = epoch;
            StopDecision::Improved
        } else if epoch - self.best_epoch >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub seed: u64,
    pub accuracy: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub variant: String,
    pub test_acc_mean: f64,
    pub test_acc_ci95: f64,
    pub per_epoch: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub test_episodes: usize,
    pub failed_episodes: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_episode: Vec<EpisodeRecord>,
    /// Not serialized: reports must be reproducible byte for byte.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl RunReport {
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("variant: {}\n", self.variant));
        if !self.per_epoch.is_empty() {
            out.push_str(&format!("{:>6} {:>12} {:>10}\n", "epoch", "train_loss", "val_acc"));
            for e in &self.per_epoch {
                out.push_str(&format!("{:>6} {:>12.5} {:>10.4}\n", e.epoch, e.train_loss, e.val_acc));
            }
            out.push_str(&format!("best epoch: {}\n", self.best_epoch));
        }
        out.push_str(&format!(
            "test accuracy: {:.4} ± {:.4} (95% CI, {} episodes, {} failed)\n",
            self.test_acc_mean, self.test_acc_ci95, self.test_episodes, self.failed_episodes
        ));
        out.push_str(&format!("wall clock: {:.1}s\n", self.wall_clock_secs));
        out
    }
}

/// Mean and normal-approximation 95% half-width of per-episode accuracies.
pub fn mean_ci95(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, Z_95 * (var / n as f64).sqrt())
}

/// Trained parameters plus the run metadata needed to reproduce evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: AdapterParams,
    pub config: TrainConfig,
    pub best_val_acc: f64,
    pub best_epoch: usize,
    pub fingerprints: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    #[serde(flatten)]
    params: ParamsFile,
    config: TrainConfig,
    best_val_acc: f64,
    best_epoch: usize,
    fingerprints: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        let file = CheckpointFile {
            params: ParamsFile::from(&self.params),
            config: self.config.clone(),
            best_val_acc: self.best_val_acc,
            best_epoch: self.best_epoch,
            fingerprints: self.fingerprints.clone(),
        };
        serde_json::to_string_pretty(&file).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_str(text)
            .map_err(|e| TrainError::Config(format!("checkpoint: {e}")))?;
        Ok(Checkpoint {
            params: AdapterParams::try_from(file.params)?,
            config: file.config,
            best_val_acc: file.best_val_acc,
            best_epoch: file.best_epoch,
            fingerprints: file.fingerprints,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json() + "\n").map_err(|e| TrainError::Io {
            path: path.display().to_string(),
            msg: e.to_string(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| TrainError::Io {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        Self::from_json(&text)
    }

    /// A checkpoint with freshly initialized parameters (nothing trained).
    pub fn untrained(config: &TrainConfig, dim: usize) -> Result<Self> {
        config.validate()?;
        let params = AdapterParams::seeded(
            config.adapter_config(config.dim.unwrap_or(dim)),
            derive_seed(config.seed, STREAM_INIT, 0),
        )?;
        Ok(Checkpoint {
            params,
            config: config.clone(),
            best_val_acc: 0.0,
            best_epoch: 0,
            fingerprints: BTreeMap::new(),
        })
    }
}

struct EvalSummary {
    accuracies: Vec<f64>,
    records: Vec<EpisodeRecord>,
    failed: usize,
}

/// Evaluates `count` episodes drawn with seeds derived from `(seed, stream,
/// round)`. Episodes are independent and run in parallel; results are kept
/// in episode order. Failed episodes are logged and skipped.
fn evaluate_episodes(
    params: &AdapterParams,
    corpus: &LabeledCorpus,
    config: &TrainConfig,
    count: usize,
    stream: u64,
    round: u64,
) -> Result<EvalSummary> {
    let min_size = config.k_shot + config.m_query;
    let eligible = corpus.eligible_classes(min_size);
    if eligible.len() < config.n_way {
        let short: Vec<String> = corpus
            .undersized_classes(min_size)
            .into_iter()
            .map(|(l, n)| format!("{l} ({n})"))
            .collect();
        return Err(TrainError::Evaluation(format!(
            "{} split has {} classes with >= {min_size} samples, need {}; short classes: [{}]",
            corpus.split,
            eligible.len(),
            config.n_way,
            short.join(", ")
        )));
    }
    let base = derive_seed(config.seed, stream, round);
    let results: Vec<(u64, Result<EpisodeOutcome>)> = (0..count)
        .into_par_iter()
        .map(|i| {
            let seed = derive_seed(base, stream, i as u64);
            let outcome = sample_episode_seeded(corpus, config.n_way, config.k_shot, config.m_query, seed)
                .map_err(TrainError::from)
                .and_then(|ep| {
                    episode_step(params, &ep, config, &mut ChaCha8Rng::seed_from_u64(seed), false)
                });
            (seed, outcome)
        })
        .collect();
    let mut summary = EvalSummary {
        accuracies: Vec::with_capacity(count),
        records: Vec::with_capacity(count),
        failed: 0,
    };
    for (i, (seed, outcome)) in results.into_iter().enumerate() {
        match outcome {
            Ok(o) => {
                summary.accuracies.push(o.accuracy);
                summary.records.push(EpisodeRecord {
                    episode: i,
                    seed,
                    accuracy: o.accuracy,
                    loss: o.loss,
                });
            }
            Err(e) => {
                log::warn!("evaluation episode {i} failed: {e}");
                summary.failed += 1;
            }
        }
    }
    Ok(summary)
}

/// Episodic training with per-episode AdamW updates, validation after every
/// epoch and early stopping; the best-validation parameters are evaluated on
/// the test split.
pub fn train(config: &TrainConfig, data: &Dataset) -> Result<(Checkpoint, RunReport)> {
    config.validate()?;
    let started = Instant::now();
    let data_dim = data
        .train
        .dim()
        .ok_or_else(|| TrainError::Config("training split is empty".into()))?;
    let dim = config.dim.unwrap_or(data_dim);
    if dim != data_dim {
        return Err(TrainError::Config(format!(
            "config dim {dim} differs from embedding width {data_dim}"
        )));
    }
    let mut checkpoint = Checkpoint::untrained(config, dim)?;
    checkpoint.config.dim = Some(dim);
    checkpoint.fingerprints = [
        ("train".to_owned(), data.train.fingerprint()),
        ("valid".to_owned(), data.valid.fingerprint()),
    ]
    .into();
    if config.bypass_adapter {
        log::info!("adapter bypassed: no trainable parameters, evaluating directly");
        let mut report = evaluate(&checkpoint, &data.test, config)?;
        report.wall_clock_secs = started.elapsed().as_secs_f64();
        return Ok((checkpoint, report));
    }
    let mut params = checkpoint.params.clone();
    let mut state = OptimizerState::new(&params.weights);
    let mut stopper = EarlyStopping::new(config.patience);
    let mut per_epoch = Vec::new();

    for epoch in 1..=config.epochs {
        let train_loss = match train_epoch(&mut params, &mut state, config, &data.train, epoch) {
            Ok(loss) => loss,
            Err(e) => {
                return Err(TrainError::Aborted {
                    epoch,
                    source: Box::new(e),
                    partial: Box::new(checkpoint),
                })
            }
        };
        let val = evaluate_episodes(
            &params,
            &data.valid,
            config,
            config.episodes_val,
            STREAM_VALID,
            epoch as u64,
        )?;
        let (val_acc, _) = mean_ci95(&val.accuracies);
        log::info!("epoch {epoch}: train loss {train_loss:.5}, valid acc {val_acc:.4}");
        per_epoch.push(EpochRecord {
            epoch,
            train_loss,
            val_acc,
        });
        match stopper.observe(epoch, val_acc) {
            StopDecision::Improved => {
                checkpoint.params = params.clone();
                checkpoint.best_val_acc = val_acc;
                checkpoint.best_epoch = epoch;
            }
            StopDecision::Continue => {}
            StopDecision::Stop => {
                log::info!("early stop after epoch {epoch} (best {})", stopper.best_epoch());
                break;
            }
        }
    }

    let mut report = evaluate(&checkpoint, &data.test, config)?;
    report.per_epoch = per_epoch;
    report.best_epoch = checkpoint.best_epoch;
    report.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok((checkpoint, report))
}

fn train_epoch(
    params: &mut AdapterParams,
    state: &mut OptimizerState,
    config: &TrainConfig,
    corpus: &LabeledCorpus,
    epoch: usize,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_TRAIN, epoch as u64));
    let mut total_loss = 0.0;
    for _ in 0..config.episodes_train {
        let seed = rng.random::<u64>();
        let episode =
            sample_episode_seeded(corpus, config.n_way, config.k_shot, config.m_query, seed)?;
        let outcome = episode_step(params, &episode, config, &mut rng, true)?;
        total_loss += outcome.loss;
        if let Some(grads) = outcome.gradients {
            let lr = lr_schedule(state.step + 1, config.warmup_steps as u64, config.learning_rate);
            adamw_step(&mut params.weights, &grads, state, lr, config.weight_decay)?;
        }
    }
    Ok(total_loss / config.episodes_train as f64)
}

/// Test-split evaluation over `config.episodes_test` episodes using the
/// checkpoint's parameters and `config`'s variant flags.
pub fn evaluate(checkpoint: &Checkpoint, corpus: &LabeledCorpus, config: &TrainConfig) -> Result<RunReport> {
    config.validate()?;
    let started = Instant::now();
    if let Some(d) = corpus.dim() {
        if !config.bypass_adapter && d != checkpoint.params.dim() {
            return Err(TrainError::Evaluation(format!(
                "checkpoint width {} differs from corpus width {d}",
                checkpoint.params.dim()
            )));
        }
    }
    let summary = evaluate_episodes(
        &checkpoint.params,
        corpus,
        config,
        config.episodes_test,
        STREAM_TEST,
        0,
    )?;
    let (mean, ci) = mean_ci95(&summary.accuracies);
    Ok(RunReport {
        variant: config.variant().to_owned(),
        test_acc_mean: mean,
        test_acc_ci95: ci,
        per_epoch: Vec::new(),
        best_epoch: checkpoint.best_epoch,
        test_episodes: summary.accuracies.len(),
        failed_episodes: summary.failed,
        per_episode: summary.records,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

/// Seed of the `index`-th test episode, as used by [`evaluate`].
pub fn test_episode_seed(config: &TrainConfig, index: usize) -> u64 {
    derive_seed(derive_seed(config.seed, STREAM_TEST, 0), STREAM_TEST, index as u64)
}

/// Support representations averaged per class, for callers that need plain
/// prototypes alongside augmented ones.
pub fn support_only_prototypes(reps: &EpisodeReps, class_ids: &[String]) -> Result<PrototypeSet> {
    Ok(support_mean_prototypes(class_ids, &reps.support)?)
}

/// Flattened `(support reps, query reps)` of an episode, support class-major.
pub fn stacked_reps(reps: &EpisodeReps) -> (Array2<f64>, Array2<f64>) {
    let views: Vec<_> = reps.support.iter().map(|s| s.view()).collect();
    let support = ndarray::concatenate(ndarray::Axis(0), &views).expect("equal widths");
    (support, reps.query.clone())
}
