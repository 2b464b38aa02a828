//! MixUp neighbour distributions.
//!
//! A single `lambda ~ Beta(alpha, alpha)` is drawn per minibatch and samples are
//! paired through a uniform random permutation of the batch.

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::ot::{CostMatrix, DiscreteMeasure, ExactSolver};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixupConfig {
    pub alpha: f64,
    pub per_batch_lambda: bool,
    pub seed: u64,
}

impl Default for MixupConfig {
    fn default() -> Self {
        Self { alpha: 0.2, per_batch_lambda: true, seed: 0 }
    }
}

impl MixupConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!("alpha must be > 0, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Draw `lambda ~ Beta(alpha, alpha)`.
pub fn sample_lambda<R: Rng + ?Sized>(cfg: &MixupConfig, rng: &mut R) -> Result<f64> {
    cfg.validate()?;
    let beta = Beta::new(cfg.alpha, cfg.alpha).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(beta.sample(rng))
}

pub fn random_permutation<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    perm
}

fn check_mix_args(rows: usize, lambda: f64, perm: &[usize]) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("lambda {lambda} outside [0, 1]")));
    }
    if perm.len() != rows {
        return Err(Error::InvalidArgument(format!("permutation of length {} for {rows} rows", perm.len())));
    }
    let mut seen = vec![false; rows];
    for &p in perm {
        if p >= rows || std::mem::replace(&mut seen[p], true) {
            return Err(Error::InvalidArgument("perm is not a permutation".into()));
        }
    }
    Ok(())
}

fn interpolate(x: ArrayView2<f64>, lambda: f64, perm: &[usize]) -> Array2<f64> {
    let partner = x.select(Axis(0), perm);
    let mut out = x.to_owned();
    out.zip_mut_with(&partner, |a, &b| *a = lambda * *a + (1.0 - lambda) * b);
    out
}

/// `X_mix[i] = lambda X[i] + (1 - lambda) X[perm[i]]`, same for the labels.
pub fn mix_source_batch(
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    lambda: f64,
    perm: &[usize],
) -> Result<(Array2<f64>, Array2<f64>)> {
    if x.nrows() != y.nrows() {
        return Err(Error::DimensionMismatch(format!("{} inputs and {} labels", x.nrows(), y.nrows())));
    }
    check_mix_args(x.nrows(), lambda, perm)?;
    Ok((interpolate(x, lambda, perm), interpolate(y, lambda, perm)))
}

/// Inputs-only MixUp for the target batch; pseudo-labels are computed on the
/// mixed inputs downstream.
pub fn mix_target_batch(x: ArrayView2<f64>, lambda: f64, perm: &[usize]) -> Result<Array2<f64>> {
    check_mix_args(x.nrows(), lambda, perm)?;
    Ok(interpolate(x, lambda, perm))
}

/// Ground metric for the mixture bound check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroundMetric {
    Euclidean,
    SquaredEuclidean,
}

impl GroundMetric {
    pub fn cost(self, x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<CostMatrix> {
        match self {
            GroundMetric::Euclidean => CostMatrix::euclidean(x, y),
            GroundMetric::SquaredEuclidean => CostMatrix::squared_euclidean(x, y),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundCheckConfig {
    pub mixup: MixupConfig,
    pub num_lambda_draws: usize,
    pub metric: GroundMetric,
    /// Limit on the support of the pooled mixtures.
    pub max_support: usize,
}

impl Default for BoundCheckConfig {
    fn default() -> Self {
        Self { mixup: MixupConfig::default(), num_lambda_draws: 20, metric: GroundMetric::Euclidean, max_support: 2048 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundCheck {
    /// `W(mix_mu, mix_nu)` between the pooled mixtures over the drawn lambdas.
    pub lhs: f64,
    /// Mean of `W(mix_mu_l, mix_nu_l')` over all ordered pairs of drawn lambdas.
    pub rhs: f64,
    /// Standard error of `rhs`.
    pub stderr: f64,
    /// Mean of `W(mix_mu_l, mix_nu_l)` with a shared lambda, as in training.
    pub rhs_shared: f64,
    pub metric: GroundMetric,
    pub lambdas: Vec<f64>,
}

/// Neighbour measure for a fixed lambda: atoms `lambda x_i + (1 - lambda) x_j`
/// over all ordered pairs with weight `w_i w_j`.
pub fn neighbour_measure(mu: &DiscreteMeasure, lambda: f64) -> DiscreteMeasure {
    let n = mu.len();
    let d = mu.dim();
    let mut points = Array2::zeros((n * n, d));
    let mut weights = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let mut row = points.row_mut(i * n + j);
            for k in 0..d {
                row[k] = lambda * mu.points[[i, k]] + (1.0 - lambda) * mu.points[[j, k]];
            }
            weights.push(mu.weights[i] * mu.weights[j]);
        }
    }
    DiscreteMeasure { points, weights, labels: None, one_hot: None }
}

fn pooled(parts: &[DiscreteMeasure]) -> DiscreteMeasure {
    let views: Vec<_> = parts.iter().map(|p| p.points.view()).collect();
    let points = ndarray::concatenate(Axis(0), &views).expect("equal dimensions");
    let scale = 1.0 / parts.len() as f64;
    let weights = parts.iter().flat_map(|p| p.weights.iter().map(move |w| w * scale)).collect();
    DiscreteMeasure { points, weights, labels: None, one_hot: None }
}

/// Empirical check of `W(mix_mu, mix_nu) <= E_{lambda, lambda'} W(mix_mu_lambda, mix_nu_lambda')`
/// in feature space.
///
/// One set of lambdas is drawn; the mixtures on both sides pool the neighbour
/// measures over that set, and the right-hand side averages over every
/// ordered pair `(lambda_k, lambda_l)` drawn independently from it. Convexity
/// of the transport cost then makes `lhs <= rhs` hold up to solver precision.
pub fn proposition1_check(mu: &DiscreteMeasure, nu: &DiscreteMeasure, cfg: &BoundCheckConfig) -> Result<BoundCheck> {
    mu.ensure_probability("source")?;
    nu.ensure_probability("target")?;
    if mu.dim() != nu.dim() {
        return Err(Error::DimensionMismatch(format!("point dimensions {} and {}", mu.dim(), nu.dim())));
    }
    if cfg.num_lambda_draws == 0 {
        return Err(Error::InvalidArgument("num_lambda_draws must be >= 1".into()));
    }
    let draws = cfg.num_lambda_draws;
    let pooled_size = mu.len().max(nu.len()).pow(2) * draws;
    if pooled_size > cfg.max_support {
        return Err(Error::SupportTooLarge { size: pooled_size, limit: cfg.max_support });
    }
    let mut rng = crate::rng::stream(cfg.mixup.seed, crate::rng::streams::MIXUP);
    let lambdas: Vec<f64> = (0..draws).map(|_| sample_lambda(&cfg.mixup, &mut rng)).collect::<Result<_>>()?;
    let mus: Vec<_> = lambdas.iter().map(|&l| neighbour_measure(mu, l)).collect();
    let nus: Vec<_> = lambdas.iter().map(|&l| neighbour_measure(nu, l)).collect();

    let solver = ExactSolver::with_max_support(cfg.max_support);
    let wasserstein = |a: &DiscreteMeasure, b: &DiscreteMeasure| -> Result<f64> {
        let cost = cfg.metric.cost(a.points.view(), b.points.view())?;
        Ok(solver.solve(a, b, &cost)?.objective_value)
    };

    let mut pair_values = Vec::with_capacity(draws * draws);
    for a in &mus {
        for b in &nus {
            pair_values.push(wasserstein(a, b)?);
        }
    }
    let count = pair_values.len() as f64;
    let rhs = pair_values.iter().sum::<f64>() / count;
    let var = if pair_values.len() > 1 {
        pair_values.iter().map(|v| (v - rhs).powi(2)).sum::<f64>() / (count - 1.0)
    } else {
        0.0
    };
    let rhs_shared = (0..draws).map(|k| pair_values[k * draws + k]).sum::<f64>() / draws as f64;
    let lhs = wasserstein(&pooled(&mus), &pooled(&nus))?;
    Ok(BoundCheck { lhs, rhs, stderr: (var / count).sqrt(), rhs_shared, metric: cfg.metric, lambdas })
}
