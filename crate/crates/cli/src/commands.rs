use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use otda_core::checks::{self, CheckKind, CheckReport, SuiteConfig};
use otda_core::data::LabeledDataset;
use otda_core::minibatch::{csv_row, labelled_plan, MinibatchSpec, PlanDiagnostics, CSV_HEADER};
use otda_core::model::{save_checkpoint, MlpParams};
use otda_core::ot::{Solver, TransportPlan};
use otda_core::plot::{render_plans_svg, PlanPanel};
use otda_core::trainer::{fit, MethodSpec, TrainHistory};

use crate::config::ConfigFile;
use crate::error::{CliError, Result};
use crate::output::OutputDir;

pub const SCHEMA_VERSION: u32 = 1;

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::config("--jobs", e.to_string()))
}

fn matrix_csv(plan: &TransportPlan) -> String {
    let mut s = String::new();
    for row in plan.coupling.rows() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "{}", cells.join(","));
    }
    s
}

struct PlanRun {
    seed: u64,
    solver: Solver,
    m: usize,
    plan: TransportPlan,
    diag: PlanDiagnostics,
    row: String,
}

/// Aggregated minibatch plans for every seed, solver and batch size.
pub fn cmd_plans(cfg: &ConfigFile, out: &OutputDir, jobs: usize) -> Result<()> {
    let scenario = cfg.scenario()?;
    let solvers = cfg.plan_solvers();
    let sizes = cfg.batch_sizes();
    let solver_cfg = cfg.solver_config();
    let relative = cfg.solver.relative_epsilon.unwrap_or(false);
    let stratified = cfg.batch.stratified.unwrap_or(false);
    let k = cfg.num_draws();

    let per_seed: Vec<Result<(LabeledDataset, LabeledDataset, Vec<PlanRun>)>> = pool(jobs)?.install(|| {
        cfg.seeds
            .par_iter()
            .map(|&seed| {
                let (source, target) = scenario.clone().with_seed(seed).generate()?;
                let mut runs = Vec::new();
                for &solver in &solvers {
                    for &m in &sizes {
                        let spec = MinibatchSpec::new(m, k, seed).stratified(stratified);
                        let (plan, diag, used) = labelled_plan(&source, &target, solver, &solver_cfg, relative, &spec)?;
                        let row = csv_row(seed, m, solver, &used, &diag);
                        runs.push(PlanRun { seed, solver, m, plan, diag, row });
                    }
                }
                Ok((source, target, runs))
            })
            .collect()
    });
    let per_seed = per_seed.into_iter().collect::<Result<Vec<_>>>()?;

    let mut csv = format!("{CSV_HEADER},raw_mass\n");
    for (_, _, runs) in &per_seed {
        for r in runs {
            let _ = writeln!(csv, "{},{}", r.row, r.diag.raw_mass);
        }
    }
    out.write("plans.csv", csv.as_bytes())?;
    for (source, target, runs) in &per_seed {
        let seed = runs.first().map_or(0, |r| r.seed);
        out.write_with(&format!("points_seed{seed}.csv"), |buf| {
            source.write_csv(&mut *buf)?;
            let mut t = Vec::new();
            target.write_csv(&mut t)?;
            // Skip the second header.
            let text = String::from_utf8_lossy(&t);
            buf.extend_from_slice(text.split_once('\n').map_or("", |(_, rest)| rest).as_bytes());
            Ok(())
        })?;
        for r in runs {
            out.write(
                &format!("plan_seed{}_{}_m{}.csv", r.seed, r.solver.name(), r.m),
                matrix_csv(&r.plan).as_bytes(),
            )?;
        }
    }

    if let Some((source, target, runs)) = per_seed.first() {
        if source.dim() == 2 {
            let titles: Vec<String> =
                runs.iter().map(|r| format!("{} m={} mass={:.3}", r.solver.name(), r.m, r.diag.total_mass)).collect();
            let panels: Vec<PlanPanel<'_>> = runs
                .iter()
                .zip(&titles)
                .map(|(r, title)| PlanPanel {
                    title,
                    source: source.points.view(),
                    source_labels: &source.labels,
                    target: target.points.view(),
                    target_labels: Some(&target.labels),
                    plan: r.plan.coupling.view(),
                })
                .collect();
            out.write("plans.svg", render_plans_svg(&panels)?.as_bytes())?;
        }
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct MethodSummary {
    method: String,
    final_accuracy_mean: f64,
    final_accuracy_std: f64,
    best_accuracy_mean: f64,
    final_accuracy: Vec<f64>,
    final_per_class_accuracy: Vec<Vec<Option<f64>>>,
}

#[derive(Debug, Serialize)]
struct TrainSummary {
    schema_version: u32,
    command: &'static str,
    seeds: Vec<u64>,
    batch_size: usize,
    epochs: usize,
    pretrain_epochs: usize,
    methods: Vec<MethodSummary>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Method label usable in a file name, e.g. `mixot-ce` for `mixot(ce)`.
pub fn file_label(m: &MethodSpec) -> String {
    m.label().replace('(', "-").replace(')', "").replace('+', "-with-")
}

pub fn cmd_train(cfg: &ConfigFile, out: &OutputDir, jobs: usize) -> Result<()> {
    let scenario = cfg.scenario()?;
    let methods = cfg.methods();
    let mut tasks = Vec::new();
    for &m in &methods {
        for &seed in &cfg.seeds {
            tasks.push((m, seed, cfg.train_config(m, seed)?));
        }
    }
    let results: Vec<Result<(MlpParams, TrainHistory)>> = pool(jobs)?.install(|| {
        tasks
            .par_iter()
            .map(|(_, seed, tc)| {
                let (source, target) = scenario.clone().with_seed(*seed).generate()?;
                Ok(fit(tc, &source, &target)?)
            })
            .collect()
    });
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;

    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    for (i, ((m, seed, _), (params, history))) in tasks.iter().zip(&results).enumerate() {
        let prefix = format!("{},{seed},", m.label());
        let header = if i == 0 { "method,seed," } else { "" };
        let mut s = Vec::new();
        let mut e = Vec::new();
        history.write_steps_csv(&mut s, &prefix, header).map_err(|e| CliError::io(out.path("history.csv"), e))?;
        history
            .write_epochs_csv(&mut e, &prefix, header)
            .map_err(|e| CliError::io(out.path("history_epochs.csv"), e))?;
        // Only the first block keeps its header line.
        let strip =
            |b: Vec<u8>| if i == 0 { b } else { b.splitn(2, |&c| c == b'\n').nth(1).unwrap_or_default().to_vec() };
        steps.extend(strip(s));
        epochs.extend(strip(e));
        out.write_with(&format!("checkpoints/{}_seed{seed}.ckpt", file_label(m)), |buf| save_checkpoint(params, buf))?;
    }
    out.write("history.csv", &steps)?;
    out.write("history_epochs.csv", &epochs)?;

    let per_method = cfg.seeds.len();
    let summaries = methods
        .iter()
        .enumerate()
        .map(|(k, m)| {
            let block = &results[k * per_method..(k + 1) * per_method];
            let finals: Vec<f64> = block.iter().map(|(_, h)| h.final_accuracy().unwrap_or(f64::NAN)).collect();
            let best: Vec<f64> = block.iter().map(|(_, h)| h.best_accuracy().unwrap_or(f64::NAN)).collect();
            let (mean, std) = mean_std(&finals);
            MethodSummary {
                method: m.label(),
                final_accuracy_mean: mean,
                final_accuracy_std: std,
                best_accuracy_mean: mean_std(&best).0,
                final_accuracy: finals,
                final_per_class_accuracy: block
                    .iter()
                    .map(|(_, h)| h.epochs.last().map(|e| e.target.per_class.clone()).unwrap_or_default())
                    .collect(),
            }
        })
        .collect();
    let first = &tasks[0].2;
    out.write_json(
        "summary.json",
        &TrainSummary {
            schema_version: SCHEMA_VERSION,
            command: "train",
            seeds: cfg.seeds.clone(),
            batch_size: first.batch_size,
            epochs: first.epochs,
            pretrain_epochs: first.pretrain_epochs,
            methods: summaries,
        },
    )?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct CheckFile<'a> {
    schema_version: u32,
    seeds: &'a [u64],
    #[serde(flatten)]
    report: &'a CheckReport,
}

pub fn cmd_check(kind: CheckKind, cfg: &ConfigFile, out: &OutputDir) -> Result<CheckReport> {
    let suite = SuiteConfig { seeds: cfg.seeds.clone(), ..SuiteConfig::default() };
    let report = checks::run(kind, &suite)?;
    out.write_json(
        &format!("check_{}.json", kind.name().replace('-', "_")),
        &CheckFile { schema_version: SCHEMA_VERSION, seeds: &cfg.seeds, report: &report },
    )?;
    if !report.passed {
        return Err(CliError::CheckFailed {
            kind: kind.name().to_string(),
            failed: report.checks.iter().filter(|c| !c.passed).count(),
            total: report.checks.len(),
        });
    }
    Ok(report)
}
