use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use repcl_core::experiment::plot::{emit_plotdata, load_runs, render_table, table_rows, PlotKind};
use repcl_core::experiment::{load_config, run_experiment, RunOptions};

/// Caps the number of worker threads used by `run`.
const WORKERS_ENV: &str = "REPCL_WORKERS";

#[derive(Parser)]
#[command(name = "repcl", version, about = "Feature-forgetting experiments on synthetic regression tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate every strategy and seed of a config.
    Run {
        config: PathBuf,
        /// Comma-separated seeds, replacing the config's list.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Output directory, replacing the config's.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads (also capped by REPCL_WORKERS).
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Write curve, heatmap or table data (CSV, plus SVG for curves).
    Plot {
        /// rep_curve, cl_curve, similarity_trace, gate_heatmap or table
        kind: PlotKind,
        /// Result files or directories.
        #[arg(required = true)]
        results: Vec<PathBuf>,
        #[arg(long, default_value = "plots")]
        out: PathBuf,
    },
    /// Print the final-task P_rep / P_CL table.
    Table {
        #[arg(required = true)]
        results: Vec<PathBuf>,
    },
    /// Parse and validate a config, then print its hash.
    Validate { config: PathBuf },
}

fn workers(flag: Option<usize>) -> Result<Option<usize>> {
    let cap = match std::env::var(WORKERS_ENV) {
        Ok(v) => Some(
            v.trim()
                .parse::<usize>()
                .with_context(|| format!("{WORKERS_ENV}={v} is not a number"))?,
        ),
        Err(_) => None,
    };
    let n = match (flag, cap) {
        (Some(a), Some(b)) => Some(a.min(b)),
        (a, b) => a.or(b),
    };
    if n == Some(0) {
        bail!("worker count must be at least 1");
    }
    Ok(n)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            config,
            seeds,
            out,
            workers: flag,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(seeds) = seeds {
                cfg.seeds = seeds;
            }
            if let Some(out) = out {
                cfg.output = out;
            }
            cfg.validate()?;
            let opts = RunOptions {
                workers: workers(flag)?,
                ..Default::default()
            };
            log::info!(
                "config {} -> {} ({} strategies x {} seeds)",
                cfg.config_hash(),
                cfg.output.display(),
                cfg.strategies.len(),
                cfg.seeds.len()
            );
            let summary = run_experiment(&cfg, &opts)?;
            log::info!(
                "{} computed, {} already done, {} failed",
                summary.computed.len(),
                summary.skipped.len(),
                summary.failed.len()
            );
            if !summary.failed.is_empty() {
                let names: Vec<String> = summary
                    .failed
                    .iter()
                    .map(|(k, e)| format!("{k}: {e}"))
                    .collect();
                bail!("some runs failed:\n  {}", names.join("\n  "));
            }
        }
        Command::Plot { kind, results, out } => {
            let records = load_runs(&results)?;
            for path in emit_plotdata(&records, kind, &out)? {
                println!("{}", path.display());
            }
        }
        Command::Table { results } => {
            let records = load_runs(&results)?;
            print!("{}", render_table(&table_rows(&records)));
        }
        Command::Validate { config } => {
            let cfg = load_config(&config)?;
            println!("ok {}", cfg.config_hash());
            for s in &cfg.strategies {
                println!("  {}", s.name);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
