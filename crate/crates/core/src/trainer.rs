//! Alternating plan-solve / gradient-step training.

use std::io::Write;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{stratified_batches, uniform_batches, LabeledDataset};
use crate::losses::{build_joint_cost, LabelLoss, LossWeights};
use crate::minibatch::cross_class_mass;
use crate::mixup::{mix_source_batch, mix_target_batch, random_permutation, sample_lambda, MixupConfig};
use crate::model::{
    composite_loss_and_grads, forward_classifier, forward_features, optimizer_step, predict_proba, CompositeBatch,
    MlpDims, MlpParams, OptimizerKind, OptimizerState, DEFAULT_LEARNING_RATE,
};
use crate::ot::{
    exact_ot, one_hot, plan_mass, unbalanced_sinkhorn, DiscreteMeasure, Solver, SolverConfig, TransportPlan,
};
use crate::rng::{self, streams};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    SourceOnly,
    Deepjdot,
    Jumbot,
    Mixot,
    Mixunbot,
}

impl Method {
    pub const ALL: [Method; 5] =
        [Method::SourceOnly, Method::Deepjdot, Method::Jumbot, Method::Mixot, Method::Mixunbot];

    pub fn name(self) -> &'static str {
        match self {
            Method::SourceOnly => "source_only",
            Method::Deepjdot => "deepjdot",
            Method::Jumbot => "jumbot",
            Method::Mixot => "mixot",
            Method::Mixunbot => "mixunbot",
        }
    }

    /// `None` for source-only training, which solves no transport problem.
    pub fn solver(self) -> Option<Solver> {
        match self {
            Method::SourceOnly => None,
            Method::Deepjdot | Method::Mixot => Some(Solver::Exact),
            Method::Jumbot | Method::Mixunbot => Some(Solver::Unbalanced),
        }
    }

    pub fn default_mixup(self) -> bool {
        matches!(self, Method::Mixot | Method::Mixunbot)
    }

    pub fn default_label_loss(self) -> LabelLoss {
        if self.default_mixup() {
            LabelLoss::Sce
        } else {
            LabelLoss::Ce
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method {s:?}")))
    }
}

/// A method together with its ablation switches, written `name` or
/// `name(ce|sce|rce)`, e.g. `mixot(ce)` or `deepjdot(sce)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MethodSpec {
    pub method: Method,
    pub mixup: bool,
    pub label_loss: LabelLoss,
}

impl MethodSpec {
    pub fn new(method: Method) -> Self {
        Self { method, mixup: method.default_mixup(), label_loss: method.default_label_loss() }
    }

    pub fn with_label_loss(mut self, loss: LabelLoss) -> Self {
        self.label_loss = loss;
        self
    }

    /// Canonical label, with the loss suffix only when it differs from the default.
    pub fn label(&self) -> String {
        let mut s = self.method.name().to_string();
        if self.method != Method::SourceOnly && self.label_loss != self.method.default_label_loss() {
            s.push_str(&format!("({})", self.label_loss.name()));
        }
        if self.mixup != self.method.default_mixup() {
            s.push_str(if self.mixup { "+mixup" } else { "-mixup" });
        }
        s
    }
}

impl std::str::FromStr for MethodSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s.split_once('(') {
            None => Ok(MethodSpec::new(s.parse()?)),
            Some((name, rest)) => {
                let arg = rest
                    .strip_suffix(')')
                    .ok_or_else(|| Error::InvalidArgument(format!("unbalanced parentheses in {s:?}")))?;
                Ok(MethodSpec::new(name.trim().parse()?).with_label_loss(arg.trim().parse()?))
            }
        }
    }
}

impl std::fmt::Display for MethodSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.label())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub method: MethodSpec,
    pub weights: LossWeights,
    pub eta3: f64,
    pub solver: SolverConfig,
    /// Scale `solver.epsilon` by the largest entry of each minibatch cost.
    pub relative_epsilon: bool,
    pub mixup: MixupConfig,
    /// Draw separate lambdas for the source and target batches.
    pub decouple_lambda: bool,
    pub batch_size: usize,
    pub stratified: bool,
    pub epochs: usize,
    pub pretrain_epochs: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub hidden: Vec<usize>,
    pub embedding: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(method: MethodSpec) -> Self {
        Self {
            method,
            weights: LossWeights::default(),
            eta3: if method.method == Method::SourceOnly { 0.0 } else { 1.0 },
            solver: SolverConfig::default(),
            relative_epsilon: false,
            mixup: MixupConfig::default(),
            decouple_lambda: false,
            batch_size: 30,
            stratified: true,
            epochs: 10,
            pretrain_epochs: 2,
            optimizer: OptimizerKind::adam(),
            learning_rate: DEFAULT_LEARNING_RATE,
            hidden: vec![32, 32],
            embedding: 16,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.solver.validate()?;
        self.mixup.validate()?;
        if !(self.eta3 >= 0.0 && self.eta3.is_finite()) {
            return Err(Error::InvalidArgument(format!("eta3 must be >= 0, got {}", self.eta3)));
        }
        if self.method.method.solver() == Some(Solver::Unbalanced)
            && !(self.solver.epsilon > 0.0 && self.solver.tau > 0.0)
        {
            return Err(Error::InvalidArgument("unbalanced methods need epsilon > 0 and tau > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        Ok(())
    }

    /// Transfer weight actually applied; source-only training ignores `eta3`.
    pub fn effective_eta3(&self) -> f64 {
        if self.method.method == Method::SourceOnly {
            0.0
        } else {
            self.eta3
        }
    }

    fn dims(&self, input: usize, classes: usize) -> MlpDims {
        MlpDims { input, hidden: self.hidden.clone(), embedding: self.embedding, classes }
    }

    fn solver_config(&self, max_cost: f64) -> SolverConfig {
        let mut cfg = self.solver;
        if self.relative_epsilon {
            cfg.epsilon *= max_cost.max(f64::MIN_POSITIVE);
        }
        cfg
    }
}

/// A source minibatch (inputs and hard labels).
#[derive(Debug, Clone, Copy)]
pub struct SourceBatch<'a> {
    pub x: ArrayView2<'a, f64>,
    pub labels: &'a [usize],
    pub classes: usize,
}

/// A target minibatch. `labels` feed diagnostics only.
#[derive(Debug, Clone, Copy)]
pub struct TargetBatch<'a> {
    pub x: ArrayView2<'a, f64>,
    pub labels: Option<&'a [usize]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub source_ce: f64,
    /// `<pi, C>` on the minibatch.
    pub transfer: f64,
    pub plan_mass: f64,
    /// Cross-class share of the plan mass; `NaN` without target labels.
    pub cross_class_fraction: f64,
    /// Source mixing coefficient (1 without MixUp).
    pub lambda: f64,
}

/// Intermediate quantities of one step, exposed for equivalence testing.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub loss: f64,
    pub source_ce: f64,
    pub transfer: f64,
    pub plan: Option<TransportPlan>,
    pub lambda_source: f64,
    pub lambda_target: f64,
}

/// Dominant component label of a mixed sample.
fn mixed_labels(labels: &[usize], lambda: f64, perm: &[usize]) -> Vec<usize> {
    (0..labels.len()).map(|i| if lambda >= 0.5 { labels[i] } else { labels[perm[i]] }).collect()
}

fn supervised(
    p: &mut MlpParams,
    src: &SourceBatch<'_>,
    w: &LossWeights,
    state: &mut OptimizerState,
) -> Result<StepOutput> {
    let y = one_hot(src.labels, src.classes);
    let empty = Array2::<f64>::zeros((0, 0));
    let batch = CompositeBatch {
        src_raw_x: src.x,
        src_raw_y: y.view(),
        src_x: src.x,
        src_y: y.view(),
        tgt_x: src.x,
        plan: empty.view(),
    };
    let (loss, grads) = composite_loss_and_grads(p, &batch, w, LabelLoss::Ce, 0.0)?;
    optimizer_step(p, &grads, state)?;
    Ok(StepOutput {
        loss: loss.total,
        source_ce: loss.source_ce,
        transfer: 0.0,
        plan: None,
        lambda_source: 1.0,
        lambda_target: 1.0,
    })
}

/// One training step: optional MixUp, joint cost on the current embeddings,
/// transport plan, then one optimizer step on the composite loss with the
/// plan held fixed.
pub fn training_step(
    p: &mut MlpParams,
    src: &SourceBatch<'_>,
    tgt: &TargetBatch<'_>,
    cfg: &TrainConfig,
    state: &mut OptimizerState,
    rng: &mut rng::Rng,
    step: usize,
    epoch: usize,
) -> Result<(StepOutput, StepRecord)> {
    let Some(solver) = cfg.method.method.solver() else {
        let out = supervised(p, src, &cfg.weights, state)?;
        let record = StepRecord {
            step,
            epoch,
            source_ce: out.source_ce,
            transfer: 0.0,
            plan_mass: 0.0,
            cross_class_fraction: f64::NAN,
            lambda: 1.0,
        };
        return Ok((out, record));
    };
    let m_s = src.x.nrows();
    let m_t = tgt.x.nrows();
    let ys = one_hot(src.labels, src.classes);

    let (mut lambda_s, mut lambda_t) = (1.0, 1.0);
    let (mut perm_s, mut perm_t): (Vec<usize>, Vec<usize>) = ((0..m_s).collect(), (0..m_t).collect());
    if cfg.method.mixup {
        lambda_s = sample_lambda(&cfg.mixup, rng)?;
        lambda_t = if cfg.decouple_lambda { sample_lambda(&cfg.mixup, rng)? } else { lambda_s };
        perm_s = random_permutation(m_s, rng);
        perm_t = random_permutation(m_t, rng);
    }
    let (xs, ys_mix) = if cfg.method.mixup {
        mix_source_batch(src.x, ys.view(), lambda_s, &perm_s)?
    } else {
        (src.x.to_owned(), ys.clone())
    };
    let xt = if cfg.method.mixup { mix_target_batch(tgt.x, lambda_t, &perm_t)? } else { tgt.x.to_owned() };

    let es = forward_features(p, xs.view())?;
    let et = forward_features(p, xt.view())?;
    let pt = forward_classifier(p, et.view())?;
    let cost = build_joint_cost(es.view(), ys_mix.view(), et.view(), pt.view(), &cfg.weights, cfg.method.label_loss)?;
    let a = DiscreteMeasure::uniform(Array2::zeros((m_s, 0)));
    let b = DiscreteMeasure::uniform(Array2::zeros((m_t, 0)));
    let plan = solver.solve(&a, &b, &cost, &cfg.solver_config(cost.max()))?;

    let batch = CompositeBatch {
        src_raw_x: src.x,
        src_raw_y: ys.view(),
        src_x: xs.view(),
        src_y: ys_mix.view(),
        tgt_x: xt.view(),
        plan: plan.coupling.view(),
    };
    let (loss, grads) = composite_loss_and_grads(p, &batch, &cfg.weights, cfg.method.label_loss, cfg.effective_eta3())?;
    optimizer_step(p, &grads, state)?;

    let cross_class_fraction = match tgt.labels {
        Some(yt) => {
            let s_lab = mixed_labels(src.labels, lambda_s, &perm_s);
            let t_lab = mixed_labels(yt, lambda_t, &perm_t);
            cross_class_mass(&plan, Some(&s_lab), Some(&t_lab))?.cross_class_mass_fraction
        }
        None => f64::NAN,
    };
    let record = StepRecord {
        step,
        epoch,
        source_ce: loss.source_ce,
        transfer: plan.objective_value,
        plan_mass: plan_mass(&plan),
        cross_class_fraction,
        lambda: lambda_s,
    };
    let out = StepOutput {
        loss: loss.total,
        source_ce: loss.source_ce,
        transfer: loss.transfer,
        plan: Some(plan),
        lambda_source: lambda_s,
        lambda_target: lambda_t,
    };
    Ok((out, record))
}

/// Dedicated step implementations of the four transfer methods, written
/// without the ablation switches of [`training_step`].
pub mod reference {
    use super::*;

    fn uniform(m: usize) -> DiscreteMeasure {
        DiscreteMeasure::uniform(Array2::zeros((m, 0)))
    }

    fn finish(
        p: &mut MlpParams,
        state: &mut OptimizerState,
        batch: CompositeBatch<'_>,
        w: &LossWeights,
        loss: LabelLoss,
        eta3: f64,
        plan: TransportPlan,
        lambdas: (f64, f64),
    ) -> Result<StepOutput> {
        let (l, g) = composite_loss_and_grads(p, &batch, w, loss, eta3)?;
        optimizer_step(p, &g, state)?;
        Ok(StepOutput {
            loss: l.total,
            source_ce: l.source_ce,
            transfer: l.transfer,
            plan: Some(plan),
            lambda_source: lambdas.0,
            lambda_target: lambdas.1,
        })
    }

    /// Exact OT on raw batches with a CE label cost.
    pub fn deepjdot_step(
        p: &mut MlpParams,
        state: &mut OptimizerState,
        src: &SourceBatch<'_>,
        tgt_x: ArrayView2<'_, f64>,
        w: &LossWeights,
        eta3: f64,
    ) -> Result<StepOutput> {
        let y = one_hot(src.labels, src.classes);
        let es = forward_features(p, src.x)?;
        let et = forward_features(p, tgt_x)?;
        let pt = forward_classifier(p, et.view())?;
        let c = build_joint_cost(es.view(), y.view(), et.view(), pt.view(), w, LabelLoss::Ce)?;
        let plan = exact_ot(&uniform(src.x.nrows()), &uniform(tgt_x.nrows()), &c)?;
        let batch = CompositeBatch {
            src_raw_x: src.x,
            src_raw_y: y.view(),
            src_x: src.x,
            src_y: y.view(),
            tgt_x,
            plan: plan.coupling.view(),
        };
        finish(p, state, batch, w, LabelLoss::Ce, eta3, plan.clone(), (1.0, 1.0))
    }

    /// Unbalanced entropic OT on raw batches with a CE label cost.
    pub fn jumbot_step(
        p: &mut MlpParams,
        state: &mut OptimizerState,
        src: &SourceBatch<'_>,
        tgt_x: ArrayView2<'_, f64>,
        w: &LossWeights,
        eta3: f64,
        solver: &SolverConfig,
    ) -> Result<StepOutput> {
        let y = one_hot(src.labels, src.classes);
        let es = forward_features(p, src.x)?;
        let et = forward_features(p, tgt_x)?;
        let pt = forward_classifier(p, et.view())?;
        let c = build_joint_cost(es.view(), y.view(), et.view(), pt.view(), w, LabelLoss::Ce)?;
        let plan = unbalanced_sinkhorn(&uniform(src.x.nrows()), &uniform(tgt_x.nrows()), &c, solver)?;
        let batch = CompositeBatch {
            src_raw_x: src.x,
            src_raw_y: y.view(),
            src_x: src.x,
            src_y: y.view(),
            tgt_x,
            plan: plan.coupling.view(),
        };
        finish(p, state, batch, w, LabelLoss::Ce, eta3, plan.clone(), (1.0, 1.0))
    }

    struct Mixed {
        y: Array2<f64>,
        xs: Array2<f64>,
        ys: Array2<f64>,
        xt: Array2<f64>,
        lambda: f64,
    }

    fn mix(
        src: &SourceBatch<'_>,
        tgt_x: ArrayView2<'_, f64>,
        mixup: &MixupConfig,
        rng: &mut rng::Rng,
    ) -> Result<Mixed> {
        let lambda = sample_lambda(mixup, rng)?;
        let perm_s = random_permutation(src.x.nrows(), rng);
        let perm_t = random_permutation(tgt_x.nrows(), rng);
        let y = one_hot(src.labels, src.classes);
        let (xs, ys) = mix_source_batch(src.x, y.view(), lambda, &perm_s)?;
        let xt = mix_target_batch(tgt_x, lambda, &perm_t)?;
        Ok(Mixed { y, xs, ys, xt, lambda })
    }

    /// Shared-lambda MixUp, exact OT and an SCE label cost.
    pub fn mixot_step(
        p: &mut MlpParams,
        state: &mut OptimizerState,
        src: &SourceBatch<'_>,
        tgt_x: ArrayView2<'_, f64>,
        w: &LossWeights,
        eta3: f64,
        mixup: &MixupConfig,
        rng: &mut rng::Rng,
    ) -> Result<StepOutput> {
        let mx = mix(src, tgt_x, mixup, rng)?;
        let es = forward_features(p, mx.xs.view())?;
        let et = forward_features(p, mx.xt.view())?;
        let pt = forward_classifier(p, et.view())?;
        let c = build_joint_cost(es.view(), mx.ys.view(), et.view(), pt.view(), w, LabelLoss::Sce)?;
        let plan = exact_ot(&uniform(src.x.nrows()), &uniform(tgt_x.nrows()), &c)?;
        let batch = CompositeBatch {
            src_raw_x: src.x,
            src_raw_y: mx.y.view(),
            src_x: mx.xs.view(),
            src_y: mx.ys.view(),
            tgt_x: mx.xt.view(),
            plan: plan.coupling.view(),
        };
        finish(p, state, batch, w, LabelLoss::Sce, eta3, plan.clone(), (mx.lambda, mx.lambda))
    }

    /// Shared-lambda MixUp, unbalanced entropic OT and an SCE label cost.
    pub fn mixunbot_step(
        p: &mut MlpParams,
        state: &mut OptimizerState,
        src: &SourceBatch<'_>,
        tgt_x: ArrayView2<'_, f64>,
        w: &LossWeights,
        eta3: f64,
        solver: &SolverConfig,
        mixup: &MixupConfig,
        rng: &mut rng::Rng,
    ) -> Result<StepOutput> {
        let mx = mix(src, tgt_x, mixup, rng)?;
        let es = forward_features(p, mx.xs.view())?;
        let et = forward_features(p, mx.xt.view())?;
        let pt = forward_classifier(p, et.view())?;
        let c = build_joint_cost(es.view(), mx.ys.view(), et.view(), pt.view(), w, LabelLoss::Sce)?;
        let plan = unbalanced_sinkhorn(&uniform(src.x.nrows()), &uniform(tgt_x.nrows()), &c, solver)?;
        let batch = CompositeBatch {
            src_raw_x: src.x,
            src_raw_y: mx.y.view(),
            src_x: mx.xs.view(),
            src_y: mx.ys.view(),
            tgt_x: mx.xt.view(),
            plan: plan.coupling.view(),
        };
        finish(p, state, batch, w, LabelLoss::Sce, eta3, plan.clone(), (mx.lambda, mx.lambda))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    /// `None` for classes absent from the dataset.
    pub per_class: Vec<Option<f64>>,
}

/// Argmax accuracy overall and per class (ties go to the lowest class index).
pub fn evaluate(p: &MlpParams, ds: &LabeledDataset) -> Result<Evaluation> {
    let prob = predict_proba(p, ds.points.view())?;
    let mut hits = vec![0usize; ds.classes];
    let mut counts = vec![0usize; ds.classes];
    for (row, &label) in prob.rows().into_iter().zip(&ds.labels) {
        let pred = row.iter().enumerate().fold(0, |best, (k, &v)| if v > row[best] { k } else { best });
        counts[label] += 1;
        hits[label] += usize::from(pred == label);
    }
    let total: usize = hits.iter().sum();
    Ok(Evaluation {
        accuracy: total as f64 / ds.len() as f64,
        per_class: hits.iter().zip(&counts).map(|(&h, &c)| (c > 0).then(|| h as f64 / c as f64)).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Train,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub target: Evaluation,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    /// Target accuracy at the end of training.
    pub fn final_accuracy(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.target.accuracy)
    }

    /// Best target accuracy along training (oracle selection, reported separately).
    pub fn best_accuracy(&self) -> Option<f64> {
        self.epochs.iter().map(|e| e.target.accuracy).reduce(f64::max)
    }

    pub const STEP_HEADER: &'static str = "step,epoch,source_ce,transfer,plan_mass,cross_class_fraction,lambda";

    pub fn write_steps_csv<W: Write>(&self, mut out: W, prefix: &str, prefix_header: &str) -> std::io::Result<()> {
        writeln!(out, "{prefix_header}{}", Self::STEP_HEADER)?;
        for r in &self.steps {
            writeln!(
                out,
                "{prefix}{},{},{},{},{},{},{}",
                r.step, r.epoch, r.source_ce, r.transfer, r.plan_mass, r.cross_class_fraction, r.lambda
            )?;
        }
        Ok(())
    }

    pub fn write_epochs_csv<W: Write>(&self, mut out: W, prefix: &str, prefix_header: &str) -> std::io::Result<()> {
        let classes = self.epochs.first().map_or(0, |e| e.target.per_class.len());
        let per_class: Vec<String> = (0..classes).map(|k| format!(",class{k}_accuracy")).collect();
        writeln!(out, "{prefix_header}epoch,phase,target_accuracy{}", per_class.concat())?;
        for e in &self.epochs {
            let cells: Vec<String> =
                e.target.per_class.iter().map(|v| v.map_or(String::new(), |a| a.to_string())).collect();
            let phase = match e.phase {
                Phase::Pretrain => "pretrain",
                Phase::Train => "train",
            };
            let tail = if cells.is_empty() { String::new() } else { format!(",{}", cells.join(",")) };
            writeln!(out, "{prefix}{},{phase},{}{tail}", e.epoch, e.target.accuracy)?;
        }
        Ok(())
    }
}

fn source_epoch(cfg: &TrainConfig, source: &LabeledDataset, rng: &mut rng::Rng) -> Result<Vec<Vec<usize>>> {
    if cfg.stratified {
        stratified_batches(source, cfg.batch_size, rng)
    } else {
        uniform_batches(source.len(), cfg.batch_size, rng)
    }
}

/// Pretraining on source labels, then alternating transfer steps.
///
/// Source batches follow `source_epoch`; target batches are uniform and
/// reshuffled whenever the target epoch runs out. Target accuracy is
/// evaluated after every epoch.
pub fn fit(cfg: &TrainConfig, source: &LabeledDataset, target: &LabeledDataset) -> Result<(MlpParams, TrainHistory)> {
    cfg.validate()?;
    if source.dim() != target.dim() || source.classes != target.classes {
        return Err(Error::DimensionMismatch("source and target disagree on dimension or class count".into()));
    }
    if cfg.batch_size > target.len() {
        return Err(Error::InvalidArgument(format!(
            "batch size {} exceeds the {} target samples",
            cfg.batch_size,
            target.len()
        )));
    }
    let mut p = MlpParams::init(cfg.dims(source.dim(), source.classes), cfg.seed);
    let mut state = OptimizerState::new(&p, cfg.optimizer, cfg.learning_rate);
    let mut src_rng = rng::stream(cfg.seed, streams::SOURCE_BATCHES);
    let mut tgt_rng = rng::stream(cfg.seed, streams::TARGET_BATCHES);
    let mut mix_rng = rng::stream(cfg.seed, streams::MIXUP);
    let mut history = TrainHistory::default();
    let mut step = 0;

    for epoch in 0..cfg.pretrain_epochs {
        for idx in source_epoch(cfg, source, &mut src_rng)? {
            let (x, labels) = source.select(&idx);
            let batch = SourceBatch { x: x.view(), labels: &labels, classes: source.classes };
            let out = supervised(&mut p, &batch, &cfg.weights, &mut state)?;
            history.steps.push(StepRecord {
                step,
                epoch,
                source_ce: out.source_ce,
                transfer: 0.0,
                plan_mass: 0.0,
                cross_class_fraction: f64::NAN,
                lambda: 1.0,
            });
            step += 1;
        }
        history.epochs.push(EpochRecord { epoch, phase: Phase::Pretrain, target: evaluate(&p, target)? });
    }

    let mut target_queue: Vec<Vec<usize>> = Vec::new();
    for epoch in cfg.pretrain_epochs..cfg.pretrain_epochs + cfg.epochs {
        for idx in source_epoch(cfg, source, &mut src_rng)? {
            if target_queue.is_empty() {
                target_queue = uniform_batches(target.len(), cfg.batch_size, &mut tgt_rng)?;
                target_queue.reverse();
            }
            let tidx = target_queue.pop().expect("refilled above");
            let (xs, ys) = source.select(&idx);
            let (xt, yt) = target.select(&tidx);
            let sb = SourceBatch { x: xs.view(), labels: &ys, classes: source.classes };
            let tb = TargetBatch { x: xt.view(), labels: Some(&yt) };
            let (_, record) = training_step(&mut p, &sb, &tb, cfg, &mut state, &mut mix_rng, step, epoch)?;
            history.steps.push(record);
            step += 1;
        }
        history.epochs.push(EpochRecord { epoch, phase: Phase::Train, target: evaluate(&p, target)? });
    }
    Ok((p, history))
}

/// Mean cross-entropy of `p` on a labelled dataset.
pub fn source_cross_entropy(p: &MlpParams, ds: &LabeledDataset, w: &LossWeights) -> Result<f64> {
    let prob = predict_proba(p, ds.points.view())?;
    let y = ds.one_hot();
    let total: f64 = prob.axis_iter(Axis(0)).zip(y.rows()).map(|(pr, yr)| LabelLoss::Ce.value(yr, pr, w)).sum();
    Ok(total / ds.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_blobs_pair, ScenarioConfig};

    fn small_problem() -> (LabeledDataset, LabeledDataset) {
        let cfg = ScenarioConfig {
            source_counts: vec![20, 20, 20],
            target_counts: vec![14, 4, 2],
            ..ScenarioConfig::label_shift_blobs()
        };
        gen_blobs_pair(&cfg).unwrap()
    }

    fn quick(method: &str) -> TrainConfig {
        TrainConfig {
            batch_size: 6,
            epochs: 2,
            pretrain_epochs: 1,
            learning_rate: 1e-3,
            hidden: vec![8],
            embedding: 4,
            ..TrainConfig::new(method.parse().unwrap())
        }
    }

    #[test]
    fn method_specs_parse() {
        let s: MethodSpec = "mixot(ce)".parse().unwrap();
        assert_eq!((s.method, s.mixup, s.label_loss), (Method::Mixot, true, LabelLoss::Ce));
        let s: MethodSpec = "deepjdot(rce)".parse().unwrap();
        assert_eq!((s.method, s.mixup, s.label_loss), (Method::Deepjdot, false, LabelLoss::Sce));
        assert_eq!(s.label(), "deepjdot(sce)");
        assert_eq!("mixunbot".parse::<MethodSpec>().unwrap().label(), "mixunbot");
        assert!("mixot(ce".parse::<MethodSpec>().is_err());
        assert!("dann".parse::<MethodSpec>().is_err());
    }

    #[test]
    fn zero_epochs_return_initial_parameters() {
        let (s, t) = small_problem();
        let cfg = TrainConfig { epochs: 0, pretrain_epochs: 0, ..quick("mixunbot") };
        let (p, h) = fit(&cfg, &s, &t).unwrap();
        assert_eq!(p, MlpParams::init(cfg.dims(2, 3), cfg.seed));
        assert!(h.steps.is_empty() && h.epochs.is_empty());
    }

    #[test]
    fn fit_is_deterministic() {
        let (s, t) = small_problem();
        for method in ["deepjdot", "mixunbot"] {
            let cfg = quick(method);
            let (p1, h1) = fit(&cfg, &s, &t).unwrap();
            let (p2, h2) = fit(&cfg, &s, &t).unwrap();
            assert_eq!(p1, p2);
            assert_eq!(format!("{h1:?}"), format!("{h2:?}"));
        }
    }

    #[test]
    fn source_only_matches_plain_supervised_training() {
        let (s, t) = small_problem();
        let cfg = quick("source_only");
        let (p, _) = fit(&cfg, &s, &t).unwrap();

        let mut q = MlpParams::init(cfg.dims(2, 3), cfg.seed);
        let mut state = OptimizerState::new(&q, cfg.optimizer, cfg.learning_rate);
        let mut r = rng::stream(cfg.seed, streams::SOURCE_BATCHES);
        let w = LossWeights::default();
        for _ in 0..cfg.pretrain_epochs + cfg.epochs {
            for idx in stratified_batches(&s, cfg.batch_size, &mut r).unwrap() {
                let (x, labels) = s.select(&idx);
                let y = one_hot(&labels, 3);
                let empty = Array2::<f64>::zeros((0, 0));
                let batch = CompositeBatch {
                    src_raw_x: x.view(),
                    src_raw_y: y.view(),
                    src_x: x.view(),
                    src_y: y.view(),
                    tgt_x: x.view(),
                    plan: empty.view(),
                };
                let (_, g) = composite_loss_and_grads(&q, &batch, &w, LabelLoss::Ce, 0.0).unwrap();
                optimizer_step(&mut q, &g, &mut state).unwrap();
            }
        }
        assert_eq!(p, q);
    }

    #[test]
    fn target_labels_never_reach_the_parameters() {
        let (s, t) = small_problem();
        let mut shuffled = t.clone();
        shuffled.labels.rotate_left(7);
        for method in ["deepjdot", "mixot", "mixunbot"] {
            let cfg = quick(method);
            let (p1, h1) = fit(&cfg, &s, &t).unwrap();
            let (p2, h2) = fit(&cfg, &s, &shuffled).unwrap();
            assert_eq!(p1, p2, "{method}");
            // Only the label-dependent diagnostics change.
            let strip =
                |h: &TrainHistory| h.steps.iter().map(|r| (r.source_ce, r.transfer, r.plan_mass)).collect::<Vec<_>>();
            assert_eq!(strip(&h1), strip(&h2));
        }
    }

    #[test]
    fn unbalanced_step_sheds_mass_on_outlier_class() {
        // Target has a class far away from every source sample.
        let cfg = ScenarioConfig {
            source_counts: vec![10, 10, 0],
            target_counts: vec![5, 5, 10],
            ..ScenarioConfig::label_shift_blobs()
        };
        let (s, t) = gen_blobs_pair(&cfg).unwrap();
        let mut train = quick("mixunbot");
        train.solver.tau = 0.1;
        train.stratified = false;
        let mut p = MlpParams::init(train.dims(2, 3), 0);
        let mut state = OptimizerState::adam(&p);
        let mut r = rng::stream(0, streams::MIXUP);
        let idx: Vec<usize> = (0..20).collect();
        let (xs, ys) = s.select(&idx);
        let (xt, yt) = t.select(&idx);
        let sb = SourceBatch { x: xs.view(), labels: &ys, classes: 3 };
        let tb = TargetBatch { x: xt.view(), labels: Some(&yt) };
        let (_, rec) = training_step(&mut p, &sb, &tb, &train, &mut state, &mut r, 0, 0).unwrap();
        assert!(rec.plan_mass < 1.0, "{}", rec.plan_mass);
    }

    #[test]
    fn evaluation() {
        let (_, t) = small_problem();
        // Zero parameters predict class 0 everywhere.
        let p = MlpParams::zeros(MlpDims { input: 2, hidden: vec![], embedding: 2, classes: 3 });
        let ev = evaluate(&p, &t).unwrap();
        assert_eq!(ev.accuracy, 14.0 / 20.0);
        assert_eq!(ev.per_class, vec![Some(1.0), Some(0.0), Some(0.0)]);
    }
}
