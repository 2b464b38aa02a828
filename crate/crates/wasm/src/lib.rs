//! Browser bindings for the toy transport demos. Every export takes plain
//! numbers and returns a JSON document.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use otda_core::data::gen_figure1_scenario;
use otda_core::minibatch::{labelled_plan, MinibatchSpec, PlanDiagnostics};
use otda_core::mixup::{sample_lambda, MixupConfig};
use otda_core::ot::{Solver, SolverConfig};
use otda_core::rng;

#[derive(Debug, Serialize)]
struct Points {
    x: Vec<[f64; 2]>,
    labels: Vec<usize>,
}

#[derive(Debug, Serialize)]
struct PlanView {
    solver: &'static str,
    coupling: Vec<Vec<f64>>,
    diagnostics: PlanDiagnostics,
}

#[derive(Debug, Serialize)]
struct PlansResponse {
    source: Points,
    target: Points,
    plans: Vec<PlanView>,
}

fn points(ds: &otda_core::data::LabeledDataset) -> Points {
    Points { x: ds.points.rows().into_iter().map(|r| [r[0], r[1]]).collect(), labels: ds.labels.clone() }
}

fn to_json<T: Serialize>(v: &T) -> Result<String, String> {
    serde_json::to_string(v).map_err(|e| e.to_string())
}

fn uot_config(tau: f64) -> SolverConfig {
    SolverConfig::default().with_epsilon(0.1).with_tau(tau)
}

pub fn figure1_plans_json(seed: u64, m: usize, tau: f64, num_draws: usize) -> Result<String, String> {
    let (source, target) = gen_figure1_scenario(seed);
    let spec = MinibatchSpec::new(m, num_draws, seed);
    let mut plans = Vec::new();
    for (solver, cfg) in [(Solver::Exact, SolverConfig::default()), (Solver::Unbalanced, uot_config(tau))] {
        let (plan, diagnostics, _) =
            labelled_plan(&source, &target, solver, &cfg, true, &spec).map_err(|e| e.to_string())?;
        let coupling = plan.coupling.rows().into_iter().map(|r| r.to_vec()).collect();
        plans.push(PlanView { solver: solver.name(), coupling, diagnostics });
    }
    to_json(&PlansResponse { source: points(&source), target: points(&target), plans })
}

#[derive(Debug, Serialize)]
struct MassPoint {
    tau: f64,
    total_mass: f64,
    cross_class_fraction: f64,
}

pub fn uot_mass_curve_json(seed: u64, m: usize, num_draws: usize, taus: &[f64]) -> Result<String, String> {
    let (source, target) = gen_figure1_scenario(seed);
    let spec = MinibatchSpec::new(m, num_draws, seed);
    let curve = taus
        .iter()
        .map(|&tau| {
            let (_, d, _) = labelled_plan(&source, &target, Solver::Unbalanced, &uot_config(tau), true, &spec)
                .map_err(|e| e.to_string())?;
            Ok(MassPoint { tau, total_mass: d.total_mass, cross_class_fraction: d.cross_class_mass_fraction })
        })
        .collect::<Result<Vec<_>, String>>()?;
    to_json(&curve)
}

#[derive(Debug, Serialize)]
struct Histogram {
    alpha: f64,
    edges: Vec<f64>,
    counts: Vec<usize>,
    mean: f64,
}

pub fn lambda_histogram_json(alpha: f64, draws: usize, bins: usize, seed: u64) -> Result<String, String> {
    if bins == 0 {
        return Err("bins must be >= 1".into());
    }
    let cfg = MixupConfig { alpha, seed, ..MixupConfig::default() };
    let mut r = rng::stream(seed, rng::streams::MIXUP);
    let mut counts = vec![0usize; bins];
    let mut sum = 0.0;
    for _ in 0..draws {
        let l = sample_lambda(&cfg, &mut r).map_err(|e| e.to_string())?;
        sum += l;
        counts[((l * bins as f64) as usize).min(bins - 1)] += 1;
    }
    let edges = (0..=bins).map(|i| i as f64 / bins as f64).collect();
    to_json(&Histogram { alpha, edges, counts, mean: if draws > 0 { sum / draws as f64 } else { 0.0 } })
}

/// Exact and unbalanced (`epsilon = 0.1 max C`) minibatch plans on the toy scenario.
#[wasm_bindgen]
pub fn figure1_plans(seed: u32, m: u32, tau: f64, num_draws: u32) -> Result<String, JsValue> {
    figure1_plans_json(seed.into(), m as usize, tau, num_draws as usize).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn uot_mass_curve(seed: u32, m: u32, num_draws: u32, taus: Vec<f64>) -> Result<String, JsValue> {
    uot_mass_curve_json(seed.into(), m as usize, num_draws as usize, &taus).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn lambda_histogram(alpha: f64, draws: u32, bins: u32, seed: u32) -> Result<String, JsValue> {
    lambda_histogram_json(alpha, draws as usize, bins as usize, seed.into()).map_err(|e| JsValue::from_str(&e))
}
