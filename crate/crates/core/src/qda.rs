//! Query-set augmentation of class prototypes through entropic optimal
//! transport.
//!
//! For every class the full query set is coupled with that class's support
//! set by a Sinkhorn plan under squared Euclidean cost. The `r` queries with
//! the lowest per-unit-mass transport cost are mapped onto the support hull by
//! barycentric projection, and the prototype is the mean of the supports
//! together with the mapped points.

use itertools::Itertools;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protonet::{mean_of_rows, PrototypeSet};

#[derive(Debug, Error)]
pub enum QdaError {
    #[error("qda: shape mismatch: {0}")]
    Shape(String),
    #[error("qda: non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("qda: exact oracle supports square problems up to 8×8, got {rows}×{cols}")]
    UnsupportedSize { rows: usize, cols: usize },
    #[error("qda: transport plan row {row} carries no mass")]
    DegeneratePlan { row: usize },
    #[error("qda: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, QdaError>;

/// Pairwise squared Euclidean distances, `rows × cols`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix(Array2<f64>);

impl CostMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(QdaError::NonFinite("cost matrix"));
        }
        if values.iter().any(|&v| v < 0.0) {
            return Err(QdaError::Config("cost entries must be nonnegative".into()));
        }
        Ok(CostMatrix(values))
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn cols(&self) -> usize {
        self.0.ncols()
    }

    pub fn mean(&self) -> f64 {
        self.0.mean().unwrap_or(0.0)
    }
}

pub fn cost_matrix(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<CostMatrix> {
    if a.ncols() != b.ncols() {
        return Err(QdaError::Shape(format!(
            "vectors of width {} and {}",
            a.ncols(),
            b.ncols()
        )));
    }
    let mut c = Array2::zeros((a.nrows(), b.nrows()));
    for (i, ai) in a.rows().into_iter().enumerate() {
        for (j, bj) in b.rows().into_iter().enumerate() {
            c[[i, j]] = ai
                .iter()
                .zip(bj.iter())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .max(0.0);
        }
    }
    CostMatrix::new(c)
}

/// Entropic transport plan between uniform measures.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub matrix: Array2<f64>,
    pub row_marginal: Array1<f64>,
    pub col_marginal: Array1<f64>,
    pub epsilon: f64,
    pub iterations_used: usize,
    /// Max-norm marginal residual of the final Sinkhorn iterate.
    pub marginal_violation: f64,
    pub converged: bool,
    /// `<C, T>` for the returned matrix.
    pub cost: f64,
}

impl TransportPlan {
    pub fn row_mass(&self, row: usize) -> f64 {
        self.matrix.row(row).sum()
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

struct Potentials {
    f: Array1<f64>,
    g: Array1<f64>,
}

impl Potentials {
    /// One full row then column update at strength `eps`; returns the row
    /// marginal residual afterwards (columns are exact after their update).
    fn sweep(&mut self, c: ArrayView2<'_, f64>, log_a: f64, log_b: f64, eps: f64, a: f64) -> f64 {
        let (m, n) = c.dim();
        for i in 0..m {
            let g = &self.g;
            self.f[i] = eps * (log_a - log_sum_exp((0..n).map(|j| (g[j] - c[[i, j]]) / eps)));
        }
        for j in 0..n {
            let f = &self.f;
            self.g[j] = eps * (log_b - log_sum_exp((0..m).map(|i| (f[i] - c[[i, j]]) / eps)));
        }
        (0..m)
            .map(|i| {
                let mass: f64 = (0..n)
                    .map(|j| ((self.f[i] + self.g[j] - c[[i, j]]) / eps).exp())
                    .sum();
                (mass - a).abs()
            })
            .fold(0.0, f64::max)
    }

    fn plan(&self, c: ArrayView2<'_, f64>, eps: f64) -> Array2<f64> {
        Array2::from_shape_fn(c.dim(), |(i, j)| {
            ((self.f[i] + self.g[j] - c[[i, j]]) / eps).exp()
        })
    }
}

/// Log-domain Sinkhorn between uniform marginals with geometric
/// epsilon-scaling warm starts. Stops when the marginal residual drops below
/// `tol` or after `max_iter` sweeps in total; non-convergence is reported in
/// the plan rather than as an error. The returned matrix is projected onto
/// the exact marginal constraints.
pub fn sinkhorn(c: &CostMatrix, epsilon: f64, tol: f64, max_iter: usize) -> Result<TransportPlan> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(QdaError::Config(format!("epsilon must be positive, got {epsilon}")));
    }
    if c.view().iter().any(|v| !v.is_finite()) {
        return Err(QdaError::NonFinite("cost matrix"));
    }
    let (m, n) = c.view().dim();
    if m == 0 || n == 0 {
        return Err(QdaError::Shape(format!("empty {m}×{n} cost matrix")));
    }
    let cv = c.view();
    let (a, b) = (1.0 / m as f64, 1.0 / n as f64);
    let (log_a, log_b) = (a.ln(), b.ln());
    let mut pot = Potentials {
        f: Array1::zeros(m),
        g: Array1::zeros(n),
    };

    let max_cost = cv.fold(0.0f64, |acc, &x| acc.max(x));
    let mut stage_eps = max_cost.max(epsilon);
    let mut used = 0;
    let mut violation = f64::INFINITY;
    while stage_eps > epsilon && used < max_iter {
        let stage_tol = tol.max(1e-3 * a);
        for _ in 0..50 {
            if used == max_iter {
                break;
            }
            used += 1;
            if pot.sweep(cv, log_a, log_b, stage_eps, a) < stage_tol {
                break;
            }
        }
        stage_eps = (stage_eps * 0.5).max(epsilon);
    }
    while used < max_iter {
        used += 1;
        violation = pot.sweep(cv, log_a, log_b, epsilon, a);
        if violation < tol {
            break;
        }
    }
    let converged = violation < tol;
    if !converged {
        log::debug!("sinkhorn stopped after {used} sweeps with residual {violation:e}");
    }

    let mut matrix = pot.plan(cv, epsilon);
    if matrix.iter().any(|v| !v.is_finite()) {
        return Err(QdaError::NonFinite("transport plan"));
    }
    round_to_marginals(&mut matrix, a, b);
    let cost = (&matrix * &cv).sum();
    Ok(TransportPlan {
        matrix,
        row_marginal: Array1::from_elem(m, a),
        col_marginal: Array1::from_elem(n, b),
        epsilon,
        iterations_used: used,
        marginal_violation: violation,
        converged,
        cost,
    })
}

/// Projects a nonnegative matrix onto the transport polytope with uniform
/// marginals `a` (rows) and `b` (columns) by row/column down-scaling followed
/// by a rank-one correction.
fn round_to_marginals(t: &mut Array2<f64>, a: f64, b: f64) {
    for mut row in t.rows_mut() {
        let mass = row.sum();
        if mass > a {
            row *= a / mass;
        }
    }
    for mut col in t.columns_mut() {
        let mass = col.sum();
        if mass > b {
            col *= b / mass;
        }
    }
    let row_err: Array1<f64> = t.sum_axis(Axis(1)).mapv(|s| (a - s).max(0.0));
    let col_err: Array1<f64> = t.sum_axis(Axis(0)).mapv(|s| (b - s).max(0.0));
    let total = row_err.sum();
    if total > 0.0 {
        for ((i, j), v) in t.indexed_iter_mut() {
            *v += row_err[i] * col_err[j] / total;
        }
    }
}

/// Exact OT between uniform measures on a square cost matrix by enumerating
/// every permutation coupling. Returns the plan (scaled by `1/n`) and its cost.
pub fn exact_ot_oracle(c: &CostMatrix) -> Result<(Array2<f64>, f64)> {
    let (rows, cols) = (c.rows(), c.cols());
    if rows != cols || rows == 0 || rows > 8 {
        return Err(QdaError::UnsupportedSize { rows, cols });
    }
    let n = rows;
    let cv = c.view();
    let mut best: Option<(Vec<usize>, f64)> = None;
    for perm in (0..n).permutations(n) {
        let total: f64 = perm.iter().enumerate().map(|(i, &j)| cv[[i, j]]).sum();
        if best.as_ref().is_none_or(|(_, b)| total < *b) {
            best = Some((perm, total));
        }
    }
    let (perm, total) = best.expect("at least one permutation");
    let mut plan = Array2::zeros((n, n));
    for (i, j) in perm.into_iter().enumerate() {
        plan[[i, j]] = 1.0 / n as f64;
    }
    Ok((plan, total / n as f64))
}

/// Per-unit-mass transport cost of every query row.
pub fn query_scores(plan: &TransportPlan, c: &CostMatrix) -> Result<Array1<f64>> {
    if plan.matrix.dim() != c.view().dim() {
        return Err(QdaError::Shape(format!(
            "plan is {:?}, cost is {:?}",
            plan.matrix.dim(),
            c.view().dim()
        )));
    }
    let mut scores = Array1::zeros(c.rows());
    for (i, (t_row, c_row)) in plan.matrix.rows().into_iter().zip(c.view().rows()).enumerate() {
        let mass = t_row.sum();
        if !(mass > 0.0) {
            return Err(QdaError::DegeneratePlan { row: i });
        }
        scores[i] = t_row.dot(&c_row) / mass;
    }
    Ok(scores)
}

/// Indices of the `r` queries with the lowest per-unit-mass transport cost,
/// cheapest first; ties go to the lower index.
pub fn retrieve_top_r(plan: &TransportPlan, c: &CostMatrix, r: usize) -> Result<Vec<usize>> {
    if r == 0 {
        return Ok(Vec::new());
    }
    let scores = query_scores(plan, c)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]).then(i.cmp(&j)));
    order.truncate(r);
    Ok(order)
}

/// Row-normalized plan rows for the retrieved queries: row `k` holds the
/// convex weights that map query `retrieved[k]` onto the supports.
pub fn barycentric_weights(plan: &TransportPlan, retrieved: &[usize]) -> Result<Array2<f64>> {
    let n = plan.matrix.ncols();
    let mut weights = Array2::zeros((retrieved.len(), n));
    for (k, &i) in retrieved.iter().enumerate() {
        if i >= plan.matrix.nrows() {
            return Err(QdaError::Shape(format!(
                "query index {i} outside plan with {} rows",
                plan.matrix.nrows()
            )));
        }
        let row = plan.matrix.row(i);
        let mass = row.sum();
        if !(mass > 0.0) {
            return Err(QdaError::DegeneratePlan { row: i });
        }
        weights.row_mut(k).assign(&(&row / mass));
    }
    Ok(weights)
}

/// Barycentric projection of each retrieved query, computed row by row:
/// `sum_j T(i,j) s_j / sum_j T(i,j)`.
pub fn barycentric_map(
    plan: &TransportPlan,
    retrieved: &[usize],
    support: ArrayView2<'_, f64>,
) -> Result<Array2<f64>> {
    if support.nrows() != plan.matrix.ncols() {
        return Err(QdaError::Shape(format!(
            "{} supports for a plan with {} columns",
            support.nrows(),
            plan.matrix.ncols()
        )));
    }
    let mut mapped = Array2::zeros((retrieved.len(), support.ncols()));
    for (k, &i) in retrieved.iter().enumerate() {
        if i >= plan.matrix.nrows() {
            return Err(QdaError::Shape(format!("query index {i} outside plan")));
        }
        let row = plan.matrix.row(i);
        let mass = row.sum();
        if !(mass > 0.0) {
            return Err(QdaError::DegeneratePlan { row: i });
        }
        let mut acc = Array1::<f64>::zeros(support.ncols());
        for (j, s) in support.rows().into_iter().enumerate() {
            acc.scaled_add(row[j], &s);
        }
        mapped.row_mut(k).assign(&(acc / mass));
    }
    Ok(mapped)
}

/// The same projection in matrix form: the retrieved rows of
/// `diag(T 1)^-1 T S`.
pub fn barycentric_map_matrix(
    plan: &TransportPlan,
    retrieved: &[usize],
    support: ArrayView2<'_, f64>,
) -> Result<Array2<f64>> {
    let masses = plan.matrix.sum_axis(Axis(1));
    if let Some(row) = retrieved.iter().copied().find(|&i| i < masses.len() && !(masses[i] > 0.0)) {
        return Err(QdaError::DegeneratePlan { row });
    }
    let safe = masses.mapv(|m| if m > 0.0 { 1.0 / m } else { 0.0 });
    let inv_diag = Array2::from_diag(&safe);
    let full = inv_diag.dot(&plan.matrix).dot(&support);
    if retrieved.iter().any(|&i| i >= full.nrows()) {
        return Err(QdaError::Shape("query index outside plan".into()));
    }
    Ok(full.select(Axis(0), retrieved))
}

/// Solver and retrieval settings. `epsilon` is relative: the entropic
/// strength used for a cost matrix `C` is `epsilon * mean(C)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QdaSettings {
    pub r: usize,
    pub epsilon: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for QdaSettings {
    fn default() -> Self {
        QdaSettings {
            r: 10,
            epsilon: 0.05,
            tol: 1e-6,
            max_iter: 1000,
        }
    }
}

impl QdaSettings {
    /// Absolute entropic strength for `c`; falls back to `epsilon` itself
    /// when every cost is zero.
    pub fn epsilon_for(&self, c: &CostMatrix) -> f64 {
        let mean = c.mean();
        if mean > 0.0 {
            self.epsilon * mean
        } else {
            self.epsilon
        }
    }
}

/// Retrieval and mapping results for one class.
#[derive(Debug, Clone)]
pub struct AugmentedClass {
    pub class_index: usize,
    pub retrieved: Vec<usize>,
    /// `|retrieved| × dim`.
    pub mapped: Array2<f64>,
    /// `|retrieved| × K` convex weights with `mapped = weights · S_c`.
    pub weights: Array2<f64>,
    pub prototype: Array1<f64>,
    pub plan: Option<TransportPlan>,
}

impl AugmentedClass {
    /// Coefficients `w_j` with `prototype = sum_j w_j s_j`.
    pub fn support_coefficients(&self) -> Array1<f64> {
        let k = self.weights.ncols();
        let total = (k + self.retrieved.len()) as f64;
        let mut coef = Array1::from_elem(k, 1.0);
        if !self.retrieved.is_empty() {
            coef += &self.weights.sum_axis(Axis(0));
        }
        coef / total
    }
}

#[derive(Debug, Clone)]
pub struct PrototypeEstimate {
    pub prototypes: PrototypeSet,
    pub classes: Vec<AugmentedClass>,
}

/// Prototype per class from its supports united with barycentric projections
/// of its `r` cheapest queries. `class_ids` names the classes in order.
pub fn estimate_prototypes(
    support: &[Array2<f64>],
    queries: ArrayView2<'_, f64>,
    class_ids: &[String],
    settings: &QdaSettings,
) -> Result<PrototypeEstimate> {
    if support.len() != class_ids.len() {
        return Err(QdaError::Shape(format!(
            "{} support groups for {} class ids",
            support.len(),
            class_ids.len()
        )));
    }
    if support.len() < 2 {
        return Err(QdaError::Config("need at least two classes".into()));
    }
    let dim = queries.ncols();
    let mut classes = Vec::with_capacity(support.len());
    for (c, s) in support.iter().enumerate() {
        if s.nrows() == 0 {
            return Err(QdaError::Config(format!("class {c} has no support samples")));
        }
        if s.ncols() != dim {
            return Err(QdaError::Shape(format!(
                "class {c} supports have width {}, queries {dim}",
                s.ncols()
            )));
        }
        classes.push(augment_class(c, s.view(), queries, settings)?);
    }
    let rows: Vec<ArrayView1<'_, f64>> = classes.iter().map(|a| a.prototype.view()).collect();
    let prototypes = PrototypeSet::from_rows(class_ids.to_vec(), &rows)
        .map_err(|e| QdaError::Config(e.to_string()))?;
    Ok(PrototypeEstimate {
        prototypes,
        classes,
    })
}

fn augment_class(
    class_index: usize,
    support: ArrayView2<'_, f64>,
    queries: ArrayView2<'_, f64>,
    settings: &QdaSettings,
) -> Result<AugmentedClass> {
    let k = support.nrows();
    if settings.r == 0 || queries.nrows() == 0 {
        return Ok(AugmentedClass {
            class_index,
            retrieved: Vec::new(),
            mapped: Array2::zeros((0, support.ncols())),
            weights: Array2::zeros((0, k)),
            prototype: mean_of_rows(support),
            plan: None,
        });
    }
    let cost = cost_matrix(queries, support)?;
    let plan = sinkhorn(&cost, settings.epsilon_for(&cost), settings.tol, settings.max_iter)?;
    let retrieved = retrieve_top_r(&plan, &cost, settings.r)?;
    let weights = barycentric_weights(&plan, &retrieved)?;
    let mapped = barycentric_map(&plan, &retrieved, support)?;
    let mut union = Array2::zeros((k + mapped.nrows(), support.ncols()));
    union.slice_mut(ndarray::s![..k, ..]).assign(&support);
    union.slice_mut(ndarray::s![k.., ..]).assign(&mapped);
    Ok(AugmentedClass {
        class_index,
        retrieved,
        prototype: mean_of_rows(union.view()),
        mapped,
        weights,
        plan: Some(plan),
    })
}
