//! Minibatch transport estimators, aggregated plans and cross-class diagnostics.

use ndarray::Array2;
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::ot::{compensated_sum, plan_mass, CostMatrix, DiscreteMeasure, Solver, SolverConfig, TransportPlan};
use crate::rng::{self, streams};
use crate::{Error, Result};

/// Entries at or below this value do not count as connections.
pub const CONNECTION_THRESHOLD: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinibatchSpec {
    pub m: usize,
    pub k: usize,
    pub seed: u64,
    pub stratified_source: bool,
}

impl MinibatchSpec {
    pub fn new(m: usize, k: usize, seed: u64) -> Self {
        Self { m, k, seed, stratified_source: false }
    }

    pub fn stratified(mut self, on: bool) -> Self {
        self.stratified_source = on;
        self
    }

    pub fn validate(&self, n_src: usize, n_tgt: usize) -> Result<()> {
        if self.m == 0 || self.k == 0 {
            return Err(Error::InvalidArgument(format!("need m >= 1 and k >= 1, got m={} k={}", self.m, self.k)));
        }
        if self.m > n_src.min(n_tgt) {
            return Err(Error::InvalidArgument(format!(
                "batch size {} exceeds support sizes ({n_src}, {n_tgt})",
                self.m
            )));
        }
        Ok(())
    }

    /// Sorted source and target indices of draw `draw`.
    ///
    /// Each draw has its own random stream, so draws can be evaluated in any
    /// order. Stratified source draws take `m / K` samples per class and give
    /// the `m mod K` leftover slots to classes `draw, draw+1, ...` (mod `K`).
    pub fn draw_indices(
        &self,
        src: &DiscreteMeasure,
        tgt: &DiscreteMeasure,
        draw: usize,
    ) -> Result<(Vec<usize>, Vec<usize>)> {
        let mut rng = rng::stream(self.seed, streams::MINIBATCH_BASE + draw as u64);
        let mut s = if self.stratified_source {
            let labels = src
                .labels
                .as_deref()
                .ok_or_else(|| Error::MissingLabels("stratified draws need source labels".into()))?;
            let classes = labels.iter().max().map_or(0, |&l| l + 1);
            let mut pools: Vec<Vec<usize>> = vec![Vec::new(); classes];
            for (i, &l) in labels.iter().enumerate() {
                pools[l].push(i);
            }
            let (base, rem) = (self.m / classes, self.m % classes);
            let mut out = Vec::with_capacity(self.m);
            for (c, pool) in pools.iter().enumerate() {
                let take = base + usize::from((c + classes - draw % classes) % classes < rem);
                if take > pool.len() {
                    return Err(Error::InvalidArgument(format!(
                        "class {c} has {} samples, fewer than the quota {take}",
                        pool.len()
                    )));
                }
                out.extend(index::sample(&mut rng, pool.len(), take).into_iter().map(|j| pool[j]));
            }
            out
        } else {
            index::sample(&mut rng, src.len(), self.m).into_vec()
        };
        let mut t = index::sample(&mut rng, tgt.len(), self.m).into_vec();
        s.sort_unstable();
        t.sort_unstable();
        Ok((s, t))
    }
}

/// Monte-Carlo estimate over `k` minibatch draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinibatchEstimate {
    pub mean: f64,
    /// Standard error of the mean (sample standard deviation over `sqrt(k)`).
    pub stderr: f64,
    pub values: Vec<f64>,
}

impl MinibatchEstimate {
    pub fn from_values(values: Vec<f64>) -> Self {
        let k = values.len() as f64;
        let mean = compensated_sum(values.iter().copied()) / k;
        let stderr = if values.len() > 1 {
            let ss = compensated_sum(values.iter().map(|v| (v - mean) * (v - mean)));
            (ss / (k - 1.0)).sqrt() / k.sqrt()
        } else {
            0.0
        };
        Self { mean, stderr, values }
    }
}

fn solve_draw<F>(
    src: &DiscreteMeasure,
    tgt: &DiscreteMeasure,
    s: &[usize],
    t: &[usize],
    cost_builder: &F,
    solver: Solver,
    cfg: &SolverConfig,
    draw: usize,
) -> Result<TransportPlan>
where
    F: Fn(&[usize], &[usize]) -> Result<CostMatrix>,
{
    let wrap = |e| Error::Draw { draw, source: Box::new(e) };
    let cost = cost_builder(s, t).map_err(wrap)?;
    if cost.shape() != (s.len(), t.len()) {
        return Err(wrap(Error::DimensionMismatch(format!(
            "cost builder returned {:?} for a {}x{} batch",
            cost.shape(),
            s.len(),
            t.len()
        ))));
    }
    solver.solve(&src.subset_uniform(s), &tgt.subset_uniform(t), &cost, cfg).map_err(wrap)
}

/// Mean transport cost `<pi, C>` between uniform size-`m` sub-measures.
pub fn minibatch_transfer_estimate<F>(
    src: &DiscreteMeasure,
    tgt: &DiscreteMeasure,
    cost_builder: F,
    solver: Solver,
    cfg: &SolverConfig,
    spec: &MinibatchSpec,
) -> Result<MinibatchEstimate>
where
    F: Fn(&[usize], &[usize]) -> Result<CostMatrix>,
{
    spec.validate(src.len(), tgt.len())?;
    let mut values = Vec::with_capacity(spec.k);
    for draw in 0..spec.k {
        let (s, t) = spec.draw_indices(src, tgt, draw)?;
        values.push(solve_draw(src, tgt, &s, &t, &cost_builder, solver, cfg, draw)?.objective_value);
    }
    Ok(MinibatchEstimate::from_values(values))
}

/// Average of the minibatch plans embedded at their global positions.
pub fn aggregate_plan(
    src: &DiscreteMeasure,
    tgt: &DiscreteMeasure,
    c_full: &CostMatrix,
    solver: Solver,
    cfg: &SolverConfig,
    spec: &MinibatchSpec,
) -> Result<TransportPlan> {
    spec.validate(src.len(), tgt.len())?;
    let draws = (0..spec.k).map(|d| spec.draw_indices(src, tgt, d)).collect::<Result<Vec<_>>>()?;
    aggregate_plan_from_draws(src, tgt, c_full, solver, cfg, &draws)
}

/// [`aggregate_plan`] over explicit `(source, target)` index sets.
pub fn aggregate_plan_from_draws(
    src: &DiscreteMeasure,
    tgt: &DiscreteMeasure,
    c_full: &CostMatrix,
    solver: Solver,
    cfg: &SolverConfig,
    draws: &[(Vec<usize>, Vec<usize>)],
) -> Result<TransportPlan> {
    c_full.check_shape(src, tgt)?;
    if draws.is_empty() {
        return Err(Error::InvalidArgument("need at least one draw".into()));
    }
    let (n, p) = c_full.shape();
    let builder = |s: &[usize], t: &[usize]| Ok(c_full.slice(s, t));
    let mut sum = Array2::<f64>::zeros((n, p));
    let mut out = TransportPlan::zeros(n, p);
    let mut objectives = Vec::with_capacity(draws.len());
    let mut regularized = Vec::with_capacity(draws.len());
    for (draw, (s, t)) in draws.iter().enumerate() {
        if s.iter().any(|&i| i >= n) || t.iter().any(|&j| j >= p) {
            return Err(Error::InvalidArgument(format!("draw {draw} has an out-of-range index")));
        }
        let plan = solve_draw(src, tgt, s, t, &builder, solver, cfg, draw)?;
        for (a, &i) in s.iter().enumerate() {
            for (b, &j) in t.iter().enumerate() {
                sum[[i, j]] += plan.coupling[[a, b]];
            }
        }
        objectives.push(plan.objective_value);
        regularized.push(plan.regularized_objective);
        out.iterations += plan.iterations;
        out.converged &= plan.converged;
        out.marginal_violation = out.marginal_violation.max(plan.marginal_violation);
    }
    let k = draws.len() as f64;
    out.coupling = sum / k;
    out.objective_value = compensated_sum(objectives.into_iter()) / k;
    out.regularized_objective = compensated_sum(regularized.into_iter()) / k;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanDiagnostics {
    pub total_mass: f64,
    /// Mass summed over draws rather than averaged (`total_mass * k`).
    pub raw_mass: f64,
    pub cross_class_mass_fraction: f64,
    pub num_connections: usize,
}

impl PlanDiagnostics {
    /// Fill `raw_mass` for a plan averaged over `k` draws.
    pub fn with_draws(mut self, k: usize) -> Self {
        self.raw_mass = self.total_mass * k as f64;
        self
    }
}

pub fn cross_class_mass(
    plan: &TransportPlan,
    src_labels: Option<&[usize]>,
    tgt_labels: Option<&[usize]>,
) -> Result<PlanDiagnostics> {
    let ys = src_labels.ok_or_else(|| Error::MissingLabels("source labels required".into()))?;
    let yt = tgt_labels.ok_or_else(|| Error::MissingLabels("target labels required".into()))?;
    let (n, p) = plan.coupling.dim();
    if ys.len() != n || yt.len() != p {
        return Err(Error::DimensionMismatch(format!(
            "plan is {n}x{p} but labels have lengths {} and {}",
            ys.len(),
            yt.len()
        )));
    }
    let total = plan_mass(plan);
    let cross = compensated_sum(plan.coupling.indexed_iter().filter(|((i, j), _)| ys[*i] != yt[*j]).map(|(_, &v)| v));
    let fraction = if total > 0.0 { (cross / total).clamp(0.0, 1.0) } else { 0.0 };
    Ok(PlanDiagnostics {
        total_mass: total,
        raw_mass: total,
        cross_class_mass_fraction: fraction,
        num_connections: plan.coupling.iter().filter(|&&v| v > CONNECTION_THRESHOLD).count(),
    })
}

/// Aggregated minibatch plan between two labelled datasets under the squared
/// Euclidean input-space cost, with its cross-class diagnostics.
///
/// With `relative_epsilon`, `cfg.epsilon` is scaled by the largest entry of
/// the full cost matrix. A spec whose `m` covers both datasets is solved once
/// as a full batch.
pub fn labelled_plan(
    source: &LabeledDataset,
    target: &LabeledDataset,
    solver: Solver,
    cfg: &SolverConfig,
    relative_epsilon: bool,
    spec: &MinibatchSpec,
) -> Result<(TransportPlan, PlanDiagnostics, SolverConfig)> {
    let (src, tgt) = (source.to_measure(), target.to_measure());
    let cost = CostMatrix::squared_euclidean(source.points.view(), target.points.view())?;
    let mut cfg = *cfg;
    if relative_epsilon {
        cfg.epsilon *= cost.max();
    }
    let full = spec.m >= src.len() && spec.m >= tgt.len();
    let spec = if full { MinibatchSpec { m: src.len().max(tgt.len()), k: 1, ..*spec } } else { *spec };
    let plan = if full {
        let draws = [((0..src.len()).collect(), (0..tgt.len()).collect())];
        aggregate_plan_from_draws(&src, &tgt, &cost, solver, &cfg, &draws)?
    } else {
        aggregate_plan(&src, &tgt, &cost, solver, &cfg, &spec)?
    };
    let diag = cross_class_mass(&plan, Some(&source.labels), Some(&target.labels))?.with_draws(spec.k);
    Ok((plan, diag, cfg))
}

pub const CSV_HEADER: &str = "seed,m,solver,tau,epsilon,total_mass,cross_class_fraction,num_connections";

/// One diagnostic CSV row; `tau` and `epsilon` are left empty for the exact solver.
pub fn csv_row(seed: u64, m: usize, solver: Solver, cfg: &SolverConfig, d: &PlanDiagnostics) -> String {
    let (tau, eps) = match solver {
        Solver::Exact => (String::new(), String::new()),
        Solver::Sinkhorn => (String::new(), cfg.epsilon.to_string()),
        Solver::Unbalanced => (cfg.tau.to_string(), cfg.epsilon.to_string()),
    };
    format!(
        "{seed},{m},{},{tau},{eps},{},{},{}",
        solver.name(),
        d.total_mass,
        d.cross_class_mass_fraction,
        d.num_connections
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ot::exact_ot;
    use ndarray::array;
    use rand::Rng;

    fn cloud(seed: u64, n: usize) -> DiscreteMeasure {
        let mut r = rng::stream(seed, 99);
        DiscreteMeasure::uniform(Array2::from_shape_fn((n, 2), |_| r.random_range(-1.0..1.0)))
    }

    fn sq_builder<'a>(
        a: &'a DiscreteMeasure,
        b: &'a DiscreteMeasure,
    ) -> impl Fn(&[usize], &[usize]) -> Result<CostMatrix> + 'a {
        let full = CostMatrix::squared_euclidean(a.points.view(), b.points.view()).unwrap();
        move |s, t| Ok(full.slice(s, t))
    }

    #[test]
    fn full_batch_equals_full_problem() {
        let (a, b) = (cloud(1, 9), cloud(2, 9));
        let c = CostMatrix::squared_euclidean(a.points.view(), b.points.view()).unwrap();
        let full = exact_ot(&a, &b, &c).unwrap();
        let spec = MinibatchSpec::new(9, 1, 5);
        let est =
            minibatch_transfer_estimate(&a, &b, sq_builder(&a, &b), Solver::Exact, &SolverConfig::default(), &spec)
                .unwrap();
        assert_eq!(est.mean, full.objective_value);
        let agg = aggregate_plan(&a, &b, &c, Solver::Exact, &SolverConfig::default(), &spec).unwrap();
        assert_eq!(agg.coupling, full.coupling);
    }

    #[test]
    fn identical_supports_cost_nothing() {
        let a = cloud(3, 7);
        let spec = MinibatchSpec::new(7, 1, 0);
        let est =
            minibatch_transfer_estimate(&a, &a, sq_builder(&a, &a), Solver::Exact, &SolverConfig::default(), &spec)
                .unwrap();
        assert!(est.mean.abs() < 1e-15);
    }

    #[test]
    fn jensen_gap_is_nonnegative() {
        let (a, b) = (cloud(4, 16), cloud(5, 16));
        let c = CostMatrix::squared_euclidean(a.points.view(), b.points.view()).unwrap();
        let full = exact_ot(&a, &b, &c).unwrap().objective_value;
        let spec = MinibatchSpec::new(4, 300, 11);
        let est =
            minibatch_transfer_estimate(&a, &b, sq_builder(&a, &b), Solver::Exact, &SolverConfig::default(), &spec)
                .unwrap();
        assert!(est.mean >= full - 2.0 * est.stderr, "{} < {full}", est.mean);
    }

    #[test]
    fn variance_halves_when_draws_double() {
        let (a, b) = (cloud(6, 16), cloud(7, 16));
        let cfg = SolverConfig::default();
        let variance = |k: usize| {
            let means: Vec<f64> = (0..400)
                .map(|rep| {
                    let spec = MinibatchSpec::new(4, k, 1000 + rep);
                    minibatch_transfer_estimate(&a, &b, sq_builder(&a, &b), Solver::Exact, &cfg, &spec).unwrap().mean
                })
                .collect();
            let mu = means.iter().sum::<f64>() / means.len() as f64;
            means.iter().map(|m| (m - mu).powi(2)).sum::<f64>() / (means.len() - 1) as f64
        };
        let ratio = variance(10) / variance(20);
        assert!((1.4..=2.6).contains(&ratio), "variance ratio {ratio}");
    }

    #[test]
    fn aggregate_of_identical_draws() {
        let (a, b) = (cloud(8, 10), cloud(9, 10));
        let c = CostMatrix::squared_euclidean(a.points.view(), b.points.view()).unwrap();
        let spec = MinibatchSpec::new(4, 1, 3);
        let draw = spec.draw_indices(&a, &b, 0).unwrap();
        let cfg = SolverConfig::default();
        let one = aggregate_plan_from_draws(&a, &b, &c, Solver::Exact, &cfg, std::slice::from_ref(&draw)).unwrap();
        let two = aggregate_plan_from_draws(&a, &b, &c, Solver::Exact, &cfg, &[draw.clone(), draw]).unwrap();
        assert_eq!(one.coupling, two.coupling);
    }

    #[test]
    fn aggregate_mass_is_mean_of_draw_masses() {
        let (a, b) = (cloud(10, 12), cloud(11, 12));
        let c = CostMatrix::squared_euclidean(a.points.view(), b.points.view()).unwrap();
        let cfg = SolverConfig::default().with_epsilon(0.05).with_tau(0.5);
        let spec = MinibatchSpec::new(3, 7, 2);
        let agg = aggregate_plan(&a, &b, &c, Solver::Unbalanced, &cfg, &spec).unwrap();
        let masses: Vec<f64> = (0..7)
            .map(|d| {
                let (s, t) = spec.draw_indices(&a, &b, d).unwrap();
                let p = Solver::Unbalanced
                    .solve(&a.subset_uniform(&s), &b.subset_uniform(&t), &c.slice(&s, &t), &cfg)
                    .unwrap();
                plan_mass(&p)
            })
            .collect();
        let mean = masses.iter().sum::<f64>() / 7.0;
        assert!((plan_mass(&agg) - mean).abs() < 1e-14);
        assert!(plan_mass(&agg) < 1.0);
    }

    #[test]
    fn stratified_draws_are_balanced() {
        let points = Array2::from_shape_fn((30, 1), |(i, _)| i as f64);
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let src = DiscreteMeasure::uniform(points.clone()).with_labels(labels.clone(), 3).unwrap();
        let tgt = DiscreteMeasure::uniform(points);
        let spec = MinibatchSpec::new(6, 1, 0).stratified(true);
        for draw in 0..20 {
            let (s, t) = spec.draw_indices(&src, &tgt, draw).unwrap();
            let mut counts = [0; 3];
            for &i in &s {
                counts[labels[i]] += 1;
            }
            assert_eq!(counts, [2, 2, 2]);
            assert_eq!(t.len(), 6);
        }
        let unlabeled = MinibatchSpec::new(6, 1, 0).stratified(true);
        assert!(matches!(unlabeled.draw_indices(&tgt, &tgt, 0), Err(Error::MissingLabels(_))));
    }

    #[test]
    fn spec_errors() {
        let a = cloud(0, 5);
        let cfg = SolverConfig::default();
        for spec in [MinibatchSpec::new(6, 1, 0), MinibatchSpec::new(0, 1, 0), MinibatchSpec::new(2, 0, 0)] {
            assert!(minibatch_transfer_estimate(&a, &a, sq_builder(&a, &a), Solver::Exact, &cfg, &spec).is_err());
        }
        let bad = |_: &[usize], _: &[usize]| CostMatrix::custom(array![[f64::NAN]]);
        let err =
            minibatch_transfer_estimate(&a, &a, bad, Solver::Exact, &cfg, &MinibatchSpec::new(1, 3, 0)).unwrap_err();
        assert!(matches!(err, Error::Draw { draw: 0, .. }));
    }

    #[test]
    fn diagnostics() {
        let block = TransportPlan { coupling: array![[0.5, 0.0], [0.0, 0.5]], ..TransportPlan::zeros(2, 2) };
        let d = cross_class_mass(&block, Some(&[0, 1]), Some(&[0, 1])).unwrap();
        assert_eq!(d.cross_class_mass_fraction, 0.0);
        assert_eq!(d.num_connections, 2);
        let d = cross_class_mass(&block, Some(&[0, 1]), Some(&[1, 0])).unwrap();
        assert_eq!(d.cross_class_mass_fraction, 1.0);
        assert!(matches!(cross_class_mass(&block, None, Some(&[0, 1])), Err(Error::MissingLabels(_))));
        assert_eq!(d.with_draws(4).raw_mass, 4.0);
        let row = csv_row(3, 4, Solver::Exact, &SolverConfig::default(), &d);
        assert_eq!(row, "3,4,exact,,,1,1,2");
        assert_eq!(row.split(',').count(), CSV_HEADER.split(',').count());
    }
}
