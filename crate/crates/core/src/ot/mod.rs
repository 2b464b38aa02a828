//! Discrete optimal transport: measures, cost matrices, plans and solvers.

mod exact;
mod sinkhorn;

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use exact::{exact_ot, ExactSolver, DEFAULT_MAX_SUPPORT};
pub use sinkhorn::{sinkhorn, unbalanced_sinkhorn};

/// Tolerance on the total mass of a probability measure.
pub const PROBABILITY_TOL: f64 = 1e-12;
/// Tolerance on the row sums of one-hot / soft label vectors.
pub const ONE_HOT_TOL: f64 = 1e-9;

/// A weighted point cloud, optionally labelled.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure {
    /// `n x d` support points.
    pub points: Array2<f64>,
    pub weights: Vec<f64>,
    pub labels: Option<Vec<usize>>,
    /// `n x K` label distributions.
    pub one_hot: Option<Array2<f64>>,
}

impl DiscreteMeasure {
    pub fn new(points: Array2<f64>, weights: Vec<f64>) -> Result<Self> {
        if points.nrows() != weights.len() {
            return Err(Error::DimensionMismatch(format!("{} points but {} weights", points.nrows(), weights.len())));
        }
        if let Some((i, w)) = weights.iter().enumerate().find(|(_, w)| !(w.is_finite() && **w >= 0.0)) {
            return Err(Error::InvalidMeasure(format!("weight {i} is {w}")));
        }
        Ok(Self { points, weights, labels: None, one_hot: None })
    }

    /// Uniform probability measure on the rows of `points`.
    pub fn uniform(points: Array2<f64>) -> Self {
        let n = points.nrows();
        let w = if n == 0 { 0.0 } else { 1.0 / n as f64 };
        Self { points, weights: vec![w; n], labels: None, one_hot: None }
    }

    /// Measure with weights only (zero-dimensional points).
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        Self::new(Array2::zeros((weights.len(), 0)), weights)
    }

    /// Attach hard labels in `0..classes`; also fills `one_hot`.
    pub fn with_labels(mut self, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(Error::DimensionMismatch(format!("{} labels for {} points", labels.len(), self.len())));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidArgument(format!("label {l} outside 0..{classes}")));
        }
        self.one_hot = Some(one_hot(&labels, classes));
        self.labels = Some(labels);
        Ok(self)
    }

    /// Attach soft labels (each row a probability vector).
    pub fn with_soft_labels(mut self, soft: Array2<f64>) -> Result<Self> {
        if soft.nrows() != self.len() {
            return Err(Error::DimensionMismatch(format!("{} label rows for {} points", soft.nrows(), self.len())));
        }
        for (i, row) in soft.rows().into_iter().enumerate() {
            let s: f64 = row.sum();
            if (s - 1.0).abs() > ONE_HOT_TOL || row.iter().any(|&v| v < 0.0) {
                return Err(Error::InvalidMeasure(format!("label row {i} is not a probability vector")));
            }
        }
        self.one_hot = Some(soft);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn total_mass(&self) -> f64 {
        compensated_sum(self.weights.iter().copied())
    }

    pub fn is_probability(&self) -> bool {
        (self.total_mass() - 1.0).abs() <= PROBABILITY_TOL
    }

    pub(crate) fn ensure_probability(&self, side: &str) -> Result<()> {
        if self.is_empty() {
            return Err(Error::InvalidMeasure(format!("{side} measure is empty")));
        }
        if !self.is_probability() {
            return Err(Error::InvalidMeasure(format!("{side} weights sum to {} instead of 1", self.total_mass())));
        }
        Ok(())
    }

    /// Uniform sub-measure on the given indices, carrying points and labels.
    pub fn subset_uniform(&self, idx: &[usize]) -> Self {
        let points = self.points.select(ndarray::Axis(0), idx);
        let m = idx.len();
        let labels = self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect());
        let one_hot = self.one_hot.as_ref().map(|oh| oh.select(ndarray::Axis(0), idx));
        Self { points, weights: vec![1.0 / m as f64; m], labels, one_hot }
    }
}

pub fn one_hot(labels: &[usize], classes: usize) -> Array2<f64> {
    let mut oh = Array2::zeros((labels.len(), classes));
    for (i, &l) in labels.iter().enumerate() {
        oh[[i, l]] = 1.0;
    }
    oh
}

/// How the entries of a [`CostMatrix`] were produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum MetricTag {
    SquaredEuclidean,
    Euclidean,
    /// Feature distance plus label loss.
    Joint {
        eta1: f64,
        eta2: f64,
        label_loss: String,
    },
    Custom(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    pub values: Array2<f64>,
    pub metric: MetricTag,
}

impl CostMatrix {
    pub fn new(values: Array2<f64>, metric: MetricTag) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("cost entry {v}")));
        }
        Ok(Self { values, metric })
    }

    pub fn custom(values: Array2<f64>) -> Result<Self> {
        Self::new(values, MetricTag::Custom("custom".into()))
    }

    pub fn squared_euclidean(x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<Self> {
        Self::new(pairwise(x, y, sq_dist)?, MetricTag::SquaredEuclidean)
    }

    pub fn euclidean(x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<Self> {
        Self::new(pairwise(x, y, |a, b| sq_dist(a, b).sqrt())?, MetricTag::Euclidean)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn max(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, &v| m.max(v.abs()))
    }

    /// Sub-matrix on the given rows and columns.
    pub fn slice(&self, rows: &[usize], cols: &[usize]) -> Self {
        let values = self.values.select(ndarray::Axis(0), rows).select(ndarray::Axis(1), cols);
        Self { values, metric: self.metric.clone() }
    }

    pub(crate) fn check_shape(&self, a: &DiscreteMeasure, b: &DiscreteMeasure) -> Result<()> {
        if self.shape() != (a.len(), b.len()) {
            return Err(Error::DimensionMismatch(format!(
                "cost is {:?} but measures have {} and {} atoms",
                self.shape(),
                a.len(),
                b.len()
            )));
        }
        Ok(())
    }
}

pub(crate) fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn pairwise(
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    f: impl Fn(ArrayView1<f64>, ArrayView1<f64>) -> f64,
) -> Result<Array2<f64>> {
    if x.ncols() != y.ncols() {
        return Err(Error::DimensionMismatch(format!("point dimensions {} and {}", x.ncols(), y.ncols())));
    }
    Ok(Array2::from_shape_fn((x.nrows(), y.nrows()), |(i, j)| f(x.row(i), y.row(j))))
}

/// A coupling between two discrete measures together with solver metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub coupling: Array2<f64>,
    /// Transport cost `<coupling, C>`.
    pub objective_value: f64,
    /// Full objective including entropic and marginal penalty terms; equals
    /// `objective_value` for the exact solver.
    pub regularized_objective: f64,
    pub iterations: usize,
    pub converged: bool,
    /// L1 deviation of the marginals from the input weights (column side only
    /// for balanced Sinkhorn, whose rows are exact after the last update).
    pub marginal_violation: f64,
}

impl TransportPlan {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            coupling: Array2::zeros((rows, cols)),
            objective_value: 0.0,
            regularized_objective: 0.0,
            iterations: 0,
            converged: true,
            marginal_violation: 0.0,
        }
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.coupling.rows().into_iter().map(|r| compensated_sum(r.iter().copied())).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        self.coupling.columns().into_iter().map(|c| compensated_sum(c.iter().copied())).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub epsilon: f64,
    pub tau: f64,
    pub max_iterations: usize,
    pub tolerance: f64,
    pub log_domain: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { epsilon: 0.1, tau: 1.0, max_iterations: 1000, tolerance: 1e-7, log_domain: true }
    }
}

impl SolverConfig {
    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn with_tau(mut self, tau: f64) -> Self {
        self.tau = tau;
        self
    }

    pub fn with_max_iterations(mut self, n: usize) -> Self {
        self.max_iterations = n;
        self
    }

    pub fn with_tolerance(mut self, tol: f64) -> Self {
        self.tolerance = tol;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iterations < 1 {
            return Err(Error::InvalidArgument("max_iterations must be >= 1".into()));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::InvalidArgument("tolerance must be > 0".into()));
        }
        Ok(())
    }
}

/// Which transport problem to solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    Exact,
    Sinkhorn,
    Unbalanced,
}

impl Solver {
    pub fn solve(
        self,
        a: &DiscreteMeasure,
        b: &DiscreteMeasure,
        cost: &CostMatrix,
        cfg: &SolverConfig,
    ) -> Result<TransportPlan> {
        match self {
            Solver::Exact => exact_ot(a, b, cost),
            Solver::Sinkhorn => sinkhorn(a, b, cost, cfg),
            Solver::Unbalanced => unbalanced_sinkhorn(a, b, cost, cfg),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Solver::Exact => "exact",
            Solver::Sinkhorn => "sinkhorn",
            Solver::Unbalanced => "unbalanced",
        }
    }
}

impl std::str::FromStr for Solver {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" | "ot" | "emd" => Ok(Solver::Exact),
            "sinkhorn" | "entropic" => Ok(Solver::Sinkhorn),
            "unbalanced" | "uot" => Ok(Solver::Unbalanced),
            other => Err(Error::InvalidArgument(format!("unknown solver {other:?}"))),
        }
    }
}

/// `sum_ij coupling[i][j] * C[i][j]`.
pub fn transport_cost(plan: &TransportPlan, cost: &CostMatrix) -> Result<f64> {
    frobenius(&plan.coupling, &cost.values)
}

pub(crate) fn frobenius(p: &Array2<f64>, c: &Array2<f64>) -> Result<f64> {
    if p.dim() != c.dim() {
        return Err(Error::DimensionMismatch(format!("plan {:?} vs cost {:?}", p.dim(), c.dim())));
    }
    Ok(compensated_sum(p.iter().zip(c.iter()).map(|(x, y)| x * y)))
}

/// Generalized Kullback-Leibler divergence between nonnegative vectors,
/// `sum u log(u / v) - u + v` with `0 log 0 = 0`.
pub fn generalized_kl(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch(format!("lengths {} and {}", u.len(), v.len())));
    }
    let mut terms = Vec::with_capacity(u.len());
    for (i, (&ui, &vi)) in u.iter().zip(v).enumerate() {
        if ui < 0.0 || vi < 0.0 {
            return Err(Error::InvalidArgument(format!("negative entry at {i}")));
        }
        if ui > 0.0 {
            if vi == 0.0 {
                return Err(Error::InvalidArgument(format!("u[{i}] = {ui} > 0 while v[{i}] = 0")));
            }
            terms.push(ui * (ui / vi).ln() - ui + vi);
        } else {
            terms.push(vi);
        }
    }
    // Each term is >= 0 analytically; clamp the rounding noise.
    Ok(compensated_sum(terms.into_iter()).max(0.0))
}

/// Sum of all coupling entries.
pub fn plan_mass(plan: &TransportPlan) -> f64 {
    compensated_sum(plan.coupling.iter().copied())
}

/// `KL(pi 1 | a) + KL(pi^T 1 | b)`.
pub fn marginal_penalty(plan: &TransportPlan, a: &[f64], b: &[f64]) -> Result<f64> {
    Ok(generalized_kl(&plan.row_sums(), a)? + generalized_kl(&plan.col_sums(), b)?)
}

/// Neumaier summation; keeps marginal checks meaningful at 1e-12.
pub(crate) fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0_f64;
    let mut comp = 0.0_f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

pub(crate) fn l1_violation(sums: &[f64], target: &[f64]) -> f64 {
    sums.iter().zip(target).map(|(s, t)| (s - t).abs()).sum()
}
