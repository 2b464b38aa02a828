//! Verification suites shared by the command-line `check` command and the
//! acceptance tests.
//!
//! Every suite returns a [`CheckReport`] listing one [`CheckResult`] per
//! instance with the measured value and the threshold it was held to.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::losses::{LabelLoss, LossWeights};
use crate::mixup::{proposition1_check, BoundCheckConfig, MixupConfig};
use crate::model::{
    composite_loss_and_grads, finite_difference_check, random_inputs, CompositeBatch, MlpDims, MlpParams,
};
use crate::ot::{exact_ot, one_hot, CostMatrix, DiscreteMeasure};
use crate::{oracle, rng, Error, Result};

const INSTANCE_STREAM: u64 = 77;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckKind {
    Gradcheck,
    Prop1,
    SolverOracle,
}

impl CheckKind {
    pub const ALL: [CheckKind; 3] = [CheckKind::Gradcheck, CheckKind::Prop1, CheckKind::SolverOracle];

    pub fn name(self) -> &'static str {
        match self {
            CheckKind::Gradcheck => "gradcheck",
            CheckKind::Prop1 => "prop1",
            CheckKind::SolverOracle => "solver-oracle",
        }
    }
}

impl fmt::Display for CheckKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CheckKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CheckKind::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            Error::InvalidArgument(format!("unknown check kind `{s}` (expected gradcheck, prop1 or solver-oracle)"))
        })
    }
}

/// A single measured value. `passed` means `value <= threshold`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub passed: bool,
}

impl CheckResult {
    pub fn at_most(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self { name: name.into(), value, threshold, passed: value <= threshold }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub kind: String,
    pub checks: Vec<CheckResult>,
    pub passed: bool,
}

impl CheckReport {
    fn new(kind: CheckKind, checks: Vec<CheckResult>) -> Self {
        let passed = checks.iter().all(|c| c.passed);
        Self { kind: kind.name().to_string(), checks, passed }
    }

    pub fn worst(&self) -> Option<&CheckResult> {
        self.checks.iter().max_by(|a, b| (a.value - a.threshold).total_cmp(&(b.value - b.threshold)))
    }
}

/// Parameters of each suite. The defaults are the sizes used by `otda check`.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteConfig {
    pub seeds: Vec<u64>,
    pub gradcheck_step: f64,
    pub gradcheck_tolerance: f64,
    pub prop1_points: usize,
    pub prop1_draws: usize,
    pub oracle_sizes: Vec<usize>,
    pub oracle_instances_per_seed: usize,
    pub oracle_tolerance: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            seeds: (0..5).collect(),
            gradcheck_step: 1e-5,
            gradcheck_tolerance: 1e-4,
            prop1_points: 8,
            prop1_draws: 20,
            oracle_sizes: vec![6],
            oracle_instances_per_seed: 2,
            oracle_tolerance: 1e-9,
        }
    }
}

pub fn run(kind: CheckKind, cfg: &SuiteConfig) -> Result<CheckReport> {
    match kind {
        CheckKind::Gradcheck => gradcheck_suite(cfg),
        CheckKind::Prop1 => prop1_suite(cfg),
        CheckKind::SolverOracle => solver_oracle_suite(cfg),
    }
}

/// Seeded composite-loss instance: a small network with random weights and
/// biases (so no pre-activation sits on a ReLU kink), a raw labelled source
/// batch, a mixed-label source batch, a target batch and a random plan.
#[derive(Debug, Clone)]
pub struct GradcheckInstance {
    pub params: MlpParams,
    pub raw_x: Array2<f64>,
    pub raw_y: Array2<f64>,
    pub src_x: Array2<f64>,
    pub src_y: Array2<f64>,
    pub tgt_x: Array2<f64>,
    pub plan: Array2<f64>,
}

impl GradcheckInstance {
    pub fn seeded(seed: u64) -> Self {
        let dims = MlpDims { input: 2, hidden: vec![6, 5], embedding: 4, classes: 3 };
        let mut r = rng::stream(seed, INSTANCE_STREAM);
        let mut params = MlpParams::init(dims, seed);
        for t in params.tensors_mut().into_iter().skip(1).step_by(2) {
            t.iter_mut().for_each(|b| *b = r.random_range(-0.5..0.5));
        }
        let n = 5;
        let raw_x = random_inputs(n, 2, &mut r);
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let raw_y = one_hot(&labels, 3);
        let lam: f64 = r.random_range(0.0..1.0);
        let shifted: Vec<usize> = (0..n).map(|i| (i + 1) % n).collect();
        let src_y = &raw_y * lam + &raw_y.select(Axis(0), &shifted) * (1.0 - lam);
        let src_x = random_inputs(n, 2, &mut r);
        let tgt_x = random_inputs(n, 2, &mut r);
        let plan = Array::from_shape_fn((n, n), |_| r.random_range(0.0..2.0) / (n * n) as f64);
        Self { params, raw_x, raw_y, src_x, src_y, tgt_x, plan }
    }

    pub fn batch(&self) -> CompositeBatch<'_> {
        CompositeBatch {
            src_raw_x: self.raw_x.view(),
            src_raw_y: self.raw_y.view(),
            src_x: self.src_x.view(),
            src_y: self.src_y.view(),
            tgt_x: self.tgt_x.view(),
            plan: self.plan.view(),
        }
    }

    /// Worst relative error between analytic and central-difference gradients.
    pub fn max_relative_error(&self, label_loss: LabelLoss, h: f64) -> Result<f64> {
        let w = LossWeights::default();
        let batch = self.batch();
        let (_, grads) = composite_loss_and_grads(&self.params, &batch, &w, label_loss, 1.0)?;
        finite_difference_check(
            &self.params,
            |q| composite_loss_and_grads(q, &batch, &w, label_loss, 1.0).map(|(l, _)| l.total),
            &grads,
            h,
        )
    }
}

pub fn gradcheck_suite(cfg: &SuiteConfig) -> Result<CheckReport> {
    let mut checks = Vec::new();
    for &seed in &cfg.seeds {
        let inst = GradcheckInstance::seeded(seed);
        for loss in [LabelLoss::Ce, LabelLoss::Sce] {
            let err = inst.max_relative_error(loss, cfg.gradcheck_step)?;
            checks.push(CheckResult::at_most(
                format!("seed={seed} loss={}", loss.name()),
                err,
                cfg.gradcheck_tolerance,
            ));
        }
    }
    Ok(CheckReport::new(CheckKind::Gradcheck, checks))
}

/// Two seeded 2-D Gaussian blobs of `n` points each, centred at `(0, 0)`
/// and `(2, 1)` with standard deviation 0.5.
pub fn blob_pair(seed: u64, n: usize) -> (DiscreteMeasure, DiscreteMeasure) {
    let mut r = rng::stream(seed, INSTANCE_STREAM);
    let normal = Normal::new(0.0, 0.5).expect("valid std");
    let mut blob = |cx: f64, cy: f64| {
        let pts = Array2::from_shape_fn((n, 2), |(_, k)| normal.sample(&mut r) + if k == 0 { cx } else { cy });
        DiscreteMeasure::uniform(pts)
    };
    let mu = blob(0.0, 0.0);
    let nu = blob(2.0, 1.0);
    (mu, nu)
}

/// Mixture bound per seed, reported as `lhs - rhs` against `2 stderr`.
pub fn prop1_suite(cfg: &SuiteConfig) -> Result<CheckReport> {
    let mut checks = Vec::new();
    for &seed in &cfg.seeds {
        let (mu, nu) = blob_pair(seed, cfg.prop1_points);
        let bound = BoundCheckConfig {
            mixup: MixupConfig { seed, ..MixupConfig::default() },
            num_lambda_draws: cfg.prop1_draws,
            ..BoundCheckConfig::default()
        };
        let r = proposition1_check(&mu, &nu, &bound)?;
        checks.push(CheckResult::at_most(format!("seed={seed} lhs-rhs"), r.lhs - r.rhs, 2.0 * r.stderr));
    }
    Ok(CheckReport::new(CheckKind::Prop1, checks))
}

/// Uniform `n x n` assignment problem with costs in `[0, 1)`.
pub fn assignment_instance<R: Rng + ?Sized>(n: usize, r: &mut R) -> (DiscreteMeasure, DiscreteMeasure, CostMatrix) {
    let cost = Array2::from_shape_fn((n, n), |_| r.random_range(0.0..1.0));
    let a = DiscreteMeasure::from_weights(vec![1.0 / n as f64; n]).expect("uniform weights");
    let b = a.clone();
    (a, b, CostMatrix::custom(cost).expect("finite costs"))
}

/// `|exact objective - assignment optimum / n|` per instance.
pub fn solver_oracle_suite(cfg: &SuiteConfig) -> Result<CheckReport> {
    let mut checks = Vec::new();
    for &seed in &cfg.seeds {
        let mut r = rng::stream(seed, INSTANCE_STREAM);
        for &n in &cfg.oracle_sizes {
            for i in 0..cfg.oracle_instances_per_seed {
                let (a, b, cost) = assignment_instance(n, &mut r);
                let plan = exact_ot(&a, &b, &cost)?;
                let (best, _) = oracle::hungarian(&cost.values)?;
                let diff = (plan.objective_value - best / n as f64).abs();
                checks.push(CheckResult::at_most(format!("seed={seed} n={n} #{i}"), diff, cfg.oracle_tolerance));
            }
        }
    }
    Ok(CheckReport::new(CheckKind::SolverOracle, checks))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> SuiteConfig {
        SuiteConfig { seeds: vec![0, 1], prop1_points: 4, prop1_draws: 5, ..SuiteConfig::default() }
    }

    #[test]
    fn kinds_round_trip() {
        for k in CheckKind::ALL {
            assert_eq!(k.name().parse::<CheckKind>().unwrap(), k);
        }
        assert!("hessian".parse::<CheckKind>().is_err());
    }

    #[test]
    fn suites_pass_on_small_instances() {
        for k in CheckKind::ALL {
            let report = run(k, &quick()).unwrap();
            assert!(report.passed, "{k}: {:?}", report.worst());
            assert!(!report.checks.is_empty());
        }
    }

    #[test]
    fn report_fails_when_threshold_is_violated() {
        let cfg = SuiteConfig { gradcheck_tolerance: 0.0, ..quick() };
        let report = gradcheck_suite(&cfg).unwrap();
        assert!(!report.passed);
    }

    #[test]
    fn instances_are_seeded() {
        let (a, b) = (GradcheckInstance::seeded(3), GradcheckInstance::seeded(3));
        assert_eq!(a.params, b.params);
        assert_eq!(a.plan, b.plan);
        assert_ne!(blob_pair(0, 8).0.points, blob_pair(1, 8).0.points);
    }
}
