//! JSON run configuration.

use std::path::Path;

use serde::Deserialize;

use otda_core::data::{Generator, ScenarioConfig};
use otda_core::losses::{LossWeights, DEFAULT_CLIP_FLOOR};
use otda_core::model::{OptimizerKind, DEFAULT_LEARNING_RATE};
use otda_core::ot::{Solver, SolverConfig};
use otda_core::trainer::{MethodSpec, TrainConfig};

use crate::error::{CliError, Result};

pub const SEED_OVERRIDE_VAR: &str = "OTDA_SEED_OVERRIDE";

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T: Clone> OneOrMany<T> {
    pub fn to_vec(&self) -> Vec<T> {
        match self {
            OneOrMany::One(v) => vec![v.clone()],
            OneOrMany::Many(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum ScenarioSection {
    Preset(String),
    Custom(CustomScenario),
}

/// A preset with selected fields replaced.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomScenario {
    pub preset: String,
    pub source_counts: Option<Vec<usize>>,
    pub target_counts: Option<Vec<usize>>,
    pub means: Option<Vec<Vec<f64>>>,
    pub std: Option<f64>,
    pub noise: Option<f64>,
    pub rotation_deg: Option<f64>,
    pub shift: Option<Vec<f64>>,
    pub dropped_classes: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeightsSection {
    pub eta1: Option<f64>,
    pub eta2: Option<f64>,
    pub eta3: Option<f64>,
    pub eta4: Option<f64>,
    pub eta5: Option<f64>,
    pub clip_floor: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    /// Solvers compared by `plans`.
    pub methods: Option<Vec<String>>,
    pub epsilon: Option<f64>,
    pub tau: Option<f64>,
    pub max_iterations: Option<usize>,
    pub tolerance: Option<f64>,
    /// Scale `epsilon` by the largest ground-cost entry.
    pub relative_epsilon: Option<bool>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixupSection {
    pub alpha: Option<f64>,
    pub decouple_lambda: Option<bool>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchSection {
    pub m: Option<OneOrMany<usize>>,
    pub num_draws: Option<usize>,
    pub stratified: Option<bool>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: Option<usize>,
    pub pretrain_epochs: Option<usize>,
    pub lr: Option<f64>,
    pub optimizer: Option<String>,
    pub momentum: Option<f64>,
    pub hidden: Option<Vec<usize>>,
    pub embedding: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub scenario: Option<ScenarioSection>,
    pub method: Option<OneOrMany<String>>,
    #[serde(default)]
    pub loss_weights: LossWeightsSection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub mixup: MixupSection,
    #[serde(default)]
    pub batch: BatchSection,
    #[serde(default)]
    pub train: TrainSection,
    pub seeds: Vec<u64>,
    pub output_dir: String,
}

/// Parse with the failing field path in the error.
pub fn parse(text: &str) -> Result<ConfigFile> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        CliError::config(path, e.into_inner().to_string())
    })
}

pub fn load(path: &Path) -> Result<ConfigFile> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse(&text)
}

/// Replace the seed list from `OTDA_SEED_OVERRIDE` (comma-separated) when set.
pub fn apply_seed_override(cfg: &mut ConfigFile, value: Option<&str>) -> Result<()> {
    if let Some(v) = value {
        let seeds = v
            .split(',')
            .map(|s| s.trim().parse::<u64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| CliError::config(SEED_OVERRIDE_VAR, format!("expected comma-separated integers: {e}")))?;
        cfg.seeds = seeds;
    }
    Ok(())
}

fn check_nonneg(path: &str, v: Option<f64>) -> Result<()> {
    match v {
        Some(x) if !(x >= 0.0 && x.is_finite()) => {
            Err(CliError::config(path, format!("must be a finite value >= 0, got {x}")))
        }
        _ => Ok(()),
    }
}

fn check_positive(path: &str, v: Option<f64>) -> Result<()> {
    match v {
        Some(x) if !(x > 0.0 && x.is_finite()) => {
            Err(CliError::config(path, format!("must be a finite value > 0, got {x}")))
        }
        _ => Ok(()),
    }
}

pub fn parse_solver(name: &str) -> Option<Solver> {
    match name {
        "exact" => Some(Solver::Exact),
        "sinkhorn" => Some(Solver::Sinkhorn),
        "unbalanced" | "uot" => Some(Solver::Unbalanced),
        _ => None,
    }
}

impl ConfigFile {
    /// Checks shared by every command.
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(CliError::config("seeds", "must list at least one seed"));
        }
        if self.output_dir.trim().is_empty() {
            return Err(CliError::config("output_dir", "must not be empty"));
        }
        let w = &self.loss_weights;
        for (name, v) in [("eta1", w.eta1), ("eta2", w.eta2), ("eta3", w.eta3), ("eta4", w.eta4), ("eta5", w.eta5)] {
            check_nonneg(&format!("loss_weights.{name}"), v)?;
        }
        if let Some(c) = w.clip_floor {
            if !(c > 0.0 && c < 1.0) {
                return Err(CliError::config("loss_weights.clip_floor", format!("must lie in (0, 1), got {c}")));
            }
        }
        let s = &self.solver;
        check_nonneg("solver.epsilon", s.epsilon)?;
        check_positive("solver.tau", s.tau)?;
        check_positive("solver.tolerance", s.tolerance)?;
        if s.max_iterations == Some(0) {
            return Err(CliError::config("solver.max_iterations", "must be >= 1"));
        }
        for (i, name) in s.methods.iter().flatten().enumerate() {
            if parse_solver(name).is_none() {
                return Err(CliError::config(
                    format!("solver.methods[{i}]"),
                    format!("unknown solver `{name}` (expected exact, sinkhorn or unbalanced)"),
                ));
            }
        }
        check_positive("mixup.alpha", self.mixup.alpha)?;
        if let Some(m) = &self.batch.m {
            let ms = m.to_vec();
            if ms.is_empty() {
                return Err(CliError::config("batch.m", "must list at least one batch size"));
            }
            if let Some(i) = ms.iter().position(|&v| v == 0) {
                return Err(CliError::config(format!("batch.m[{i}]"), "must be >= 1"));
            }
        }
        if self.batch.num_draws == Some(0) {
            return Err(CliError::config("batch.num_draws", "must be >= 1"));
        }
        check_positive("train.lr", self.train.lr)?;
        check_nonneg("train.momentum", self.train.momentum)?;
        if let Some(o) = &self.train.optimizer {
            if o != "adam" && o != "sgd" {
                return Err(CliError::config(
                    "train.optimizer",
                    format!("unknown optimizer `{o}` (expected adam or sgd)"),
                ));
            }
        }
        if self.train.embedding == Some(0) {
            return Err(CliError::config("train.embedding", "must be >= 1"));
        }
        if let Some(i) = self.train.hidden.iter().flatten().position(|&h| h == 0) {
            return Err(CliError::config(format!("train.hidden[{i}]"), "must be >= 1"));
        }
        if let Some(m) = &self.method {
            for (i, name) in m.to_vec().iter().enumerate() {
                name.parse::<MethodSpec>().map_err(|e| {
                    let path =
                        if matches!(m, OneOrMany::One(_)) { "method".to_string() } else { format!("method[{i}]") };
                    CliError::config(path, e.to_string())
                })?;
            }
        }
        Ok(())
    }

    pub fn scenario(&self) -> Result<ScenarioConfig> {
        let section = self.scenario.as_ref().ok_or_else(|| CliError::config("scenario", "missing field `scenario`"))?;
        let preset = |name: &str, path: &str| match name {
            "figure1" => Ok(ScenarioConfig::figure1()),
            "label_shift_blobs" | "blobs" => Ok(ScenarioConfig::label_shift_blobs()),
            "moons" => Ok(ScenarioConfig::moons()),
            other => Err(CliError::config(
                path,
                format!("unknown scenario `{other}` (expected figure1, label_shift_blobs or moons)"),
            )),
        };
        let sc = match section {
            ScenarioSection::Preset(name) => preset(name, "scenario")?,
            ScenarioSection::Custom(c) => {
                let mut sc = preset(&c.preset, "scenario.preset")?;
                if sc.generator == Generator::Figure1 {
                    let set = [
                        c.source_counts.is_some(),
                        c.target_counts.is_some(),
                        c.means.is_some(),
                        c.std.is_some(),
                        c.noise.is_some(),
                        c.rotation_deg.is_some(),
                        c.shift.is_some(),
                        c.dropped_classes.is_some(),
                    ];
                    if set.iter().any(|&b| b) {
                        return Err(CliError::config("scenario", "the figure1 preset has a fixed geometry"));
                    }
                }
                if let Some(v) = &c.source_counts {
                    sc.source_counts = v.clone();
                }
                if let Some(v) = &c.target_counts {
                    sc.target_counts = v.clone();
                }
                if let Some(v) = &c.means {
                    sc.means = v.clone();
                }
                check_nonneg("scenario.std", c.std)?;
                check_nonneg("scenario.noise", c.noise)?;
                sc.std = c.std.unwrap_or(sc.std);
                sc.noise = c.noise.unwrap_or(sc.noise);
                sc.rotation_deg = c.rotation_deg.unwrap_or(sc.rotation_deg);
                if let Some(v) = &c.shift {
                    sc.shift = v.clone();
                }
                if let Some(v) = &c.dropped_classes {
                    sc.dropped_classes = v.clone();
                }
                sc
            }
        };
        // Surface geometry errors as config errors before any work starts.
        sc.generate().map_err(|e| CliError::config("scenario", e.to_string()))?;
        Ok(sc)
    }

    pub fn methods(&self) -> Vec<MethodSpec> {
        match &self.method {
            None => vec!["mixot".parse().expect("known method")],
            Some(m) => m.to_vec().iter().map(|s| s.parse().expect("validated")).collect(),
        }
    }

    pub fn plan_solvers(&self) -> Vec<Solver> {
        match &self.solver.methods {
            None => vec![Solver::Exact, Solver::Unbalanced],
            Some(v) => v.iter().map(|s| parse_solver(s).expect("validated")).collect(),
        }
    }

    pub fn batch_sizes(&self) -> Vec<usize> {
        self.batch.m.as_ref().map_or(vec![30], OneOrMany::to_vec)
    }

    pub fn num_draws(&self) -> usize {
        self.batch.num_draws.unwrap_or(100)
    }

    pub fn solver_config(&self) -> SolverConfig {
        let d = SolverConfig::default();
        let s = &self.solver;
        SolverConfig {
            epsilon: s.epsilon.unwrap_or(d.epsilon),
            tau: s.tau.unwrap_or(d.tau),
            max_iterations: s.max_iterations.unwrap_or(d.max_iterations),
            tolerance: s.tolerance.unwrap_or(d.tolerance),
            log_domain: d.log_domain,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        let d = LossWeights::default();
        let w = &self.loss_weights;
        LossWeights {
            eta1: w.eta1.unwrap_or(d.eta1),
            eta2: w.eta2.unwrap_or(d.eta2),
            eta4: w.eta4.unwrap_or(d.eta4),
            eta5: w.eta5.unwrap_or(d.eta5),
            clip_floor: w.clip_floor.unwrap_or(DEFAULT_CLIP_FLOOR),
        }
    }

    /// Training configuration for one method and seed. Training uses the
    /// first entry of `batch.m`.
    pub fn train_config(&self, method: MethodSpec, seed: u64) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::new(method);
        cfg.weights = self.loss_weights();
        if let Some(e) = self.loss_weights.eta3 {
            cfg.eta3 = e;
        }
        cfg.solver = self.solver_config();
        cfg.relative_epsilon = self.solver.relative_epsilon.unwrap_or(cfg.relative_epsilon);
        cfg.mixup.alpha = self.mixup.alpha.unwrap_or(cfg.mixup.alpha);
        cfg.mixup.seed = seed;
        cfg.decouple_lambda = self.mixup.decouple_lambda.unwrap_or(false);
        cfg.batch_size = self.batch_sizes()[0];
        cfg.stratified = self.batch.stratified.unwrap_or(cfg.stratified);
        let t = &self.train;
        cfg.epochs = t.epochs.unwrap_or(cfg.epochs);
        cfg.pretrain_epochs = t.pretrain_epochs.unwrap_or(cfg.pretrain_epochs);
        cfg.learning_rate = t.lr.unwrap_or(DEFAULT_LEARNING_RATE);
        cfg.optimizer = match t.optimizer.as_deref() {
            Some("sgd") => OptimizerKind::sgd(t.momentum.unwrap_or(0.0)),
            _ => OptimizerKind::adam(),
        };
        if let Some(h) = &t.hidden {
            cfg.hidden = h.clone();
        }
        cfg.embedding = t.embedding.unwrap_or(cfg.embedding);
        cfg.seed = seed;
        cfg.validate().map_err(|e| CliError::config("train", e.to_string()))?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"scenario": "figure1", "seeds": [0], "output_dir": "out"}"#;

    fn path_of(text: &str) -> String {
        let err = parse(text).and_then(|c| c.validate().map(|_| c)).unwrap_err();
        match err {
            CliError::Config { path, .. } => path,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn minimal_config_parses() {
        let cfg = parse(MINIMAL).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.scenario().unwrap(), ScenarioConfig::figure1());
        assert_eq!(cfg.plan_solvers(), vec![Solver::Exact, Solver::Unbalanced]);
    }

    #[test]
    fn errors_name_the_field() {
        assert_eq!(path_of(r#"{"scenario": "figure1", "seeds": [0]}"#), ".");
        assert_eq!(path_of(r#"{"scenario": "figure1", "seeds": [], "output_dir": "o"}"#), "seeds");
        assert_eq!(path_of(r#"{"seeds": [0], "output_dir": "o", "bogus": 1}"#), "bogus");
        assert_eq!(path_of(r#"{"seeds": [0], "output_dir": "o", "solver": {"tau": -1}}"#), "solver.tau");
        assert_eq!(path_of(r#"{"seeds": [0], "output_dir": "o", "solver": {"typo": 1}}"#), "solver.typo");
        assert_eq!(path_of(r#"{"seeds": [0], "output_dir": "o", "batch": {"m": [4, 0]}}"#), "batch.m[1]");
        assert_eq!(path_of(r#"{"seeds": [0], "output_dir": "o", "method": ["mixot", "nope"]}"#), "method[1]");
        assert_eq!(path_of(r#"{"seeds": ["x"], "output_dir": "o"}"#), "seeds[0]");
    }

    #[test]
    fn missing_output_dir_is_named() {
        let err = parse(r#"{"scenario": "figure1", "seeds": [0]}"#).unwrap_err();
        assert!(err.to_string().contains("output_dir"), "{err}");
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn custom_scenario_overrides_preset() {
        let cfg =
            parse(r#"{"scenario": {"preset": "label_shift_blobs", "std": 0.4}, "seeds": [0], "output_dir": "o"}"#)
                .unwrap();
        assert_eq!(cfg.scenario().unwrap().std, 0.4);
        let bad = parse(r#"{"scenario": {"preset": "figure1", "std": 0.4}, "seeds": [0], "output_dir": "o"}"#).unwrap();
        assert!(bad.scenario().is_err());
    }

    #[test]
    fn seed_override() {
        let mut cfg = parse(MINIMAL).unwrap();
        apply_seed_override(&mut cfg, Some("3, 4")).unwrap();
        assert_eq!(cfg.seeds, vec![3, 4]);
        assert!(apply_seed_override(&mut cfg, Some("a")).is_err());
        apply_seed_override(&mut cfg, None).unwrap();
        assert_eq!(cfg.seeds, vec![3, 4]);
    }

    #[test]
    fn train_config_picks_up_sections() {
        let cfg = parse(
            r#"{"scenario": "moons", "method": "jumbot", "seeds": [5], "output_dir": "o",
                "loss_weights": {"eta3": 0.5}, "train": {"epochs": 3, "lr": 0.001, "optimizer": "sgd"},
                "batch": {"m": [16, 32], "stratified": false}}"#,
        )
        .unwrap();
        cfg.validate().unwrap();
        let t = cfg.train_config(cfg.methods()[0], 5).unwrap();
        assert_eq!((t.eta3, t.epochs, t.batch_size, t.seed, t.stratified), (0.5, 3, 16, 5, false));
        assert_eq!(t.optimizer, OptimizerKind::sgd(0.0));
    }
}
