use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use otda_core::checks::CheckKind;

mod commands;
mod config;
mod error;
mod output;

use config::{apply_seed_override, SEED_OVERRIDE_VAR};
use error::{CliError, Result};
use output::OutputDir;

/// Minibatch optimal-transport domain adaptation experiments.
#[derive(Debug, Parser)]
#[command(name = "otda", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Worker threads for per-seed runs.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Replaces `output_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Aggregated minibatch plans with cross-class diagnostics and an SVG plot.
    Plans(Common),
    /// Train each configured method on every seed.
    Train(Common),
    /// Run a verification suite; exits with 3 if any check fails.
    Check {
        /// gradcheck, prop1 or solver-oracle.
        kind: String,
        #[command(flatten)]
        common: Common,
    },
}

fn prepare(common: &Common) -> Result<(config::ConfigFile, OutputDir)> {
    let mut cfg = config::load(&common.config)?;
    apply_seed_override(&mut cfg, std::env::var(SEED_OVERRIDE_VAR).ok().as_deref())?;
    cfg.validate()?;
    if common.jobs == 0 {
        return Err(CliError::config("--jobs", "must be >= 1"));
    }
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
    let out = OutputDir::create(dir)?;
    Ok((cfg, out))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Plans(common) => {
            let (cfg, out) = prepare(&common)?;
            commands::cmd_plans(&cfg, &out, common.jobs)
        }
        Command::Train(common) => {
            let (cfg, out) = prepare(&common)?;
            commands::cmd_train(&cfg, &out, common.jobs)
        }
        Command::Check { kind, common } => {
            let kind: CheckKind =
                kind.parse().map_err(|e: otda_core::Error| CliError::config("kind", e.to_string()))?;
            let (cfg, out) = prepare(&common)?;
            let report = commands::cmd_check(kind, &cfg, &out)?;
            if let Some(w) = report.worst() {
                println!(
                    "{kind}: {} checks passed (worst {} = {:e}, threshold {:e})",
                    report.checks.len(),
                    w.name,
                    w.value,
                    w.threshold
                );
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("otda: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
