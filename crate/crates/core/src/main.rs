use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cil_core::replay::MemoryMode;
use cil_core::runner::{self, RunConfig, OUTPUT_DIR_ENV};
use cil_core::{Error, Result};

/// Class-incremental learning experiments with and without cross-task features.
#[derive(Parser)]
#[command(name = "cil", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (loss, memory, seed) cell of a config.
    Run(GridArgs),
    /// Recompute the metric table from a prediction log.
    Metrics {
        /// Prediction log to read.
        #[arg(long)]
        log: PathBuf,
        /// Only snapshots 1..=t.
        #[arg(long)]
        t: Option<usize>,
        /// Output CSV (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the config once per memory budget and write sweep.csv.
    Sweep {
        #[command(flatten)]
        grid: GridArgs,
        /// Comma-separated budgets, e.g. `5,10,20,50,max`; defaults to grid.memory.
        #[arg(long, value_delimiter = ',')]
        budgets: Vec<MemoryMode>,
    },
}

#[derive(Args)]
struct GridArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long, env = OUTPUT_DIR_ENV)]
    out: Option<PathBuf>,
    /// Worker threads; overrides the config.
    #[arg(long)]
    workers: Option<usize>,
    /// Run this single seed instead of grid.seeds.
    #[arg(long)]
    seed: Option<u64>,
}

impl GridArgs {
    fn load(&self) -> Result<(RunConfig, PathBuf, PathBuf)> {
        let mut config = RunConfig::read(&self.config)?;
        if let Some(w) = self.workers {
            config.workers = w;
        }
        if let Some(s) = self.seed {
            config.grid.seeds = vec![s];
        }
        config.validate()?;
        let base = self
            .config
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        Ok((config, base, runner::output_dir(self.out.as_deref())))
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => {
            let (config, base, out) = args.load()?;
            let done = runner::run_experiment(&config, &base, &out)?;
            eprintln!(
                "{} cells written to {}",
                done.manifest.cell.len(),
                done.out_dir.display()
            );
        }
        Command::Sweep { grid, budgets } => {
            let (config, base, out) = grid.load()?;
            let budgets = if budgets.is_empty() { config.grid.memory.clone() } else { budgets };
            let done = runner::sweep_memory(&config, &budgets, &base, &out)?;
            eprintln!("sweep written to {}", done.out_dir.join("sweep.csv").display());
        }
        Command::Metrics { log, t, out } => match out {
            Some(path) => {
                runner::compute_metrics_from_log(&log, t, &path)?;
            }
            None => {
                let log = cil_core::metrics::PredictionLog::read(&log)?;
                let table = match t {
                    Some(t) => cil_core::metrics::MetricsTable::compute_until(&log, t)?,
                    None => cil_core::metrics::MetricsTable::compute(&log)?,
                };
                print!("{}", table.to_csv());
            }
        },
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Parse { .. } | Error::Usage(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
