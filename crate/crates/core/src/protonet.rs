//! Prototype classifier: softmax over negative squared Euclidean distances.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use thiserror::Error;

/// Floor applied to the log-probability of the true class inside the loss.
pub const LOG_PROB_FLOOR: f64 = -50.0;

#[derive(Debug, Error)]
pub enum ProtoError {
    #[error("protonet: need at least two prototypes, got {0}")]
    TooFewClasses(usize),
    #[error("protonet: duplicate class id {0:?}")]
    DuplicateClass(String),
    #[error("protonet: width mismatch (queries {queries}, prototypes {prototypes})")]
    Shape { queries: usize, prototypes: usize },
    #[error("protonet: non-finite {0}")]
    NonFinite(&'static str),
    #[error("protonet: label {label} outside 0..{classes}")]
    Label { label: usize, classes: usize },
    #[error("protonet: {labels} labels for {queries} queries")]
    LabelCount { labels: usize, queries: usize },
}

pub type Result<T> = std::result::Result<T, ProtoError>;

/// Class prototypes of one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    class_ids: Vec<String>,
    vectors: Array2<f64>,
}

impl PrototypeSet {
    pub fn new(class_ids: Vec<String>, vectors: Array2<f64>) -> Result<Self> {
        if class_ids.len() < 2 || vectors.nrows() != class_ids.len() {
            return Err(ProtoError::TooFewClasses(class_ids.len().min(vectors.nrows())));
        }
        let mut seen = BTreeSet::new();
        for id in &class_ids {
            if !seen.insert(id.as_str()) {
                return Err(ProtoError::DuplicateClass(id.clone()));
            }
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(ProtoError::NonFinite("prototype"));
        }
        Ok(PrototypeSet { class_ids, vectors })
    }

    pub fn from_rows(class_ids: Vec<String>, rows: &[ArrayView1<'_, f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, |r| r.len());
        let mut vectors = Array2::zeros((rows.len(), dim));
        for (mut dst, src) in vectors.rows_mut().into_iter().zip(rows) {
            dst.assign(src);
        }
        Self::new(class_ids, vectors)
    }

    pub fn class_ids(&self) -> &[String] {
        &self.class_ids
    }

    /// `N × dim`.
    pub fn vectors(&self) -> &Array2<f64> {
        &self.vectors
    }

    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }
}

/// Arithmetic mean of the rows, accumulated in row order.
pub fn mean_of_rows(rows: ArrayView2<'_, f64>) -> Array1<f64> {
    let mut acc = Array1::zeros(rows.ncols());
    for r in rows.rows() {
        acc += &r;
    }
    acc / rows.nrows() as f64
}

/// Plain support-mean prototypes.
pub fn support_mean_prototypes(class_ids: &[String], support: &[Array2<f64>]) -> Result<PrototypeSet> {
    let means: Vec<Array1<f64>> = support.iter().map(|s| mean_of_rows(s.view())).collect();
    let views: Vec<ArrayView1<'_, f64>> = means.iter().map(|m| m.view()).collect();
    PrototypeSet::from_rows(class_ids.to_vec(), &views)
}

/// Per-query class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    /// `n × N`.
    pub log_probs: Array2<f64>,
    pub probs: Array2<f64>,
}

fn squared_distances(
    queries: ArrayView2<'_, f64>,
    prototypes: &PrototypeSet,
) -> Result<Array2<f64>> {
    if queries.ncols() != prototypes.dim() {
        return Err(ProtoError::Shape {
            queries: queries.ncols(),
            prototypes: prototypes.dim(),
        });
    }
    if queries.iter().any(|v| !v.is_finite()) {
        return Err(ProtoError::NonFinite("query representation"));
    }
    let p = prototypes.vectors();
    Ok(Array2::from_shape_fn((queries.nrows(), p.nrows()), |(q, c)| {
        queries
            .row(q)
            .iter()
            .zip(p.row(c).iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }))
}

pub fn class_posteriors(queries: ArrayView2<'_, f64>, prototypes: &PrototypeSet) -> Result<Posterior> {
    let dist = squared_distances(queries, prototypes)?;
    let mut log_probs = dist.mapv(|d| -d);
    for mut row in log_probs.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        row -= lse;
    }
    let probs = log_probs.mapv(f64::exp);
    Ok(Posterior { log_probs, probs })
}

fn check_labels(labels: &[usize], queries: usize, classes: usize) -> Result<()> {
    if labels.len() != queries {
        return Err(ProtoError::LabelCount {
            labels: labels.len(),
            queries,
        });
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(ProtoError::Label { label, classes });
    }
    Ok(())
}

/// Mean negative log-probability of the true class, with each term's
/// log-probability floored at [`LOG_PROB_FLOOR`].
pub fn cross_entropy(posterior: &Posterior, labels: &[usize]) -> Result<f64> {
    let (n, classes) = posterior.log_probs.dim();
    check_labels(labels, n, classes)?;
    if n == 0 {
        return Ok(0.0);
    }
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(q, &y)| -posterior.log_probs[[q, y]].max(LOG_PROB_FLOOR))
        .sum();
    Ok(total / n as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierGradients {
    pub loss: f64,
    /// `n × dim`.
    pub queries: Array2<f64>,
    /// `N × dim`.
    pub prototypes: Array2<f64>,
}

/// Loss and its gradients with respect to the query representations and the
/// prototypes. Queries whose true-class log-probability sits below the floor
/// contribute a constant and therefore no gradient.
pub fn classifier_backward(
    queries: ArrayView2<'_, f64>,
    prototypes: &PrototypeSet,
    labels: &[usize],
) -> Result<ClassifierGradients> {
    let posterior = class_posteriors(queries, prototypes)?;
    let loss = cross_entropy(&posterior, labels)?;
    let (n, classes) = posterior.probs.dim();
    let p = prototypes.vectors();
    let mut grad_q = Array2::zeros(queries.raw_dim());
    let mut grad_p = Array2::zeros(p.raw_dim());
    if n == 0 {
        return Ok(ClassifierGradients {
            loss,
            queries: grad_q,
            prototypes: grad_p,
        });
    }
    let inv_n = 1.0 / n as f64;
    for (q, &y) in labels.iter().enumerate() {
        if posterior.log_probs[[q, y]] < LOG_PROB_FLOOR {
            continue;
        }
        let v = queries.row(q);
        for c in 0..classes {
            // d loss / d logit_c, with logit_c = -|v - P_c|^2
            let g = (posterior.probs[[q, c]] - if c == y { 1.0 } else { 0.0 }) * inv_n;
            if g == 0.0 {
                continue;
            }
            let diff = &v - &p.row(c);
            grad_q.row_mut(q).scaled_add(-2.0 * g, &diff);
            grad_p.row_mut(c).scaled_add(2.0 * g, &diff);
        }
    }
    Ok(ClassifierGradients {
        loss,
        queries: grad_q,
        prototypes: grad_p,
    })
}

/// Nearest prototype under squared Euclidean distance (equivalently the
/// posterior argmax); ties go to the lowest class index.
pub fn predict(queries: ArrayView2<'_, f64>, prototypes: &PrototypeSet) -> Result<Vec<usize>> {
    let dist = squared_distances(queries, prototypes)?;
    Ok(dist
        .rows()
        .into_iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::INFINITY), |(bi, bd), (i, &d)| {
                    if d < bd {
                        (i, d)
                    } else {
                        (bi, bd)
                    }
                })
                .0
        })
        .collect())
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len() as f64
}
