//! `graph-whs <command> --config path [--workers k] [--seed s] [--out dir]`
//!
//! Exit codes: 0 success, 1 a `check` failed, 2 invalid input, 3 numeric
//! failure, 64 usage error, 74 output could not be written.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;
use serde_json::json;

use crate::commands::Command;
use crate::config::ExperimentConfig;
use crate::output::{sha256_json, RunDir, MANIFEST_SCHEMA};

#[derive(Debug, Parser)]
#[command(name = "graph-whs", version, about = "Stochastic Wasserstein-Hamiltonian systems on graphs")]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Worker threads; defaults to the number of logical cores.
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    workers: Option<u32>,
    /// Overrides the master seed of the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Root of the run directories; overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] graph_whs::Error),
    #[error("{context}: {source}")]
    Io {
        context: String,
        source: std::io::Error,
    },
    #[error("{failed} of {total} checks failed")]
    CheckFailed { failed: usize, total: usize },
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_numeric() => 3,
            CliError::Core(_) => 2,
            CliError::Io { .. } => 74,
            CliError::CheckFailed { .. } => 1,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(64),
            };
        }
    };
    match execute(&cli) {
        Ok(dir) => {
            println!("wrote {}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            if let CliError::Core(graph_whs::Error::Cfl { .. }) = e {
                eprintln!("refine the state grid less or use more time steps; no artifacts were written");
            }
            ExitCode::from(e.exit_code())
        }
    }
}

fn execute(cli: &Cli) -> Result<PathBuf, CliError> {
    let mut cfg = ExperimentConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    let workers = cli
        .workers
        .map(|w| w as usize)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build_global()
        .map_err(|e| graph_whs::Error::Config(format!("cannot start {workers} workers: {e}")))?;

    commands::preflight(cli.command, &cfg)?;

    let started = chrono::Utc::now();
    let stamp = started.format("%Y%m%dT%H%M%S%.3fZ").to_string();
    let dir = RunDir::create(&cfg.output_dir, cli.command.name(), &stamp, cfg.seed).map_err(|source| CliError::Io {
        context: format!("creating a run directory under {}", cfg.output_dir.display()),
        source,
    })?;
    match run_into(cli.command, &cfg, &dir, workers, &started) {
        Ok(failures) => {
            let path = dir.commit().map_err(|source| CliError::Io {
                context: "finalising the run directory".into(),
                source,
            })?;
            match failures {
                Some((failed, total)) if failed > 0 => {
                    eprintln!("report in {}", path.display());
                    Err(CliError::CheckFailed { failed, total })
                }
                _ => Ok(path),
            }
        }
        Err(e) => {
            dir.discard();
            Err(e)
        }
    }
}

fn run_into(
    cmd: Command,
    cfg: &ExperimentConfig,
    dir: &RunDir,
    workers: usize,
    started: &chrono::DateTime<chrono::Utc>,
) -> Result<Option<(usize, usize)>, CliError> {
    let outcome = commands::run(cmd, cfg, dir)?;
    println!("{}", outcome.report);
    let io = |context: &str| {
        let context = context.to_string();
        move |source| CliError::Io { context, source }
    };
    dir.write_json("config.json", cfg).map_err(io("writing config echo"))?;
    dir.write_json("summary.json", &outcome.summary).map_err(io("writing summary"))?;
    let manifest = json!({
        "schema": MANIFEST_SCHEMA,
        "command": cmd.name(),
        "seed": cfg.seed,
        "workers": workers,
        "started": started.to_rfc3339(),
        "finished": chrono::Utc::now().to_rfc3339(),
        "version": env!("CARGO_PKG_VERSION"),
        "config": cfg,
        "config_sha256": sha256_json(cfg),
        "artifacts": dir.artifacts().map_err(io("hashing artifacts"))?,
        "rerun": format!("graph-whs {} --config config.json", cmd.name()),
    });
    dir.write_json("manifest.json", &manifest).map_err(io("writing manifest"))?;
    Ok(outcome.failures)
}
