use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use tsrobust_cli::commands::{cmd_convert, cmd_evaluate, cmd_plot, cmd_train, Log, CHECKPOINT_FILE};
use tsrobust_cli::config::ExperimentConfig;
use tsrobust_cli::error::{io_err, CliError, CliResult};
use tsrobust_cli::sweep::{run_sweep, GnlmChoice};

#[derive(Parser)]
#[command(
    name = "tsrobust",
    version,
    about = "Train, attack and evaluate robust time-series classifiers"
)]
struct Cli {
    /// Suppress progress output on standard error.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Experiment config (JSON); see `init-config`.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Gnlm {
    Off,
    On,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Convert the character-trajectories archive to the JSONL dataset format.
    Convert {
        /// The `.mat` file or a directory containing it.
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Seed for the train/val/test split.
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Train a model and write checkpoint, report and manifest.
    Train(RunArgs),
    /// Compute robustness curves for a checkpoint.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        /// Defaults to checkpoint.json in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Replaces the config's ε grid, e.g. `--epsilon 0.1,0.3`.
        #[arg(long, value_delimiter = ',')]
        epsilon: Option<Vec<f64>>,
    },
    /// Render curves CSVs as SVG line charts.
    Plot {
        #[arg(required = true)]
        csv: Vec<PathBuf>,
        /// Directory for the SVGs; defaults to each CSV's directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        title: Option<String>,
    },
    /// Train and evaluate every regime × denoising cell and tabulate results.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// TRADES regularization weights (1/λ).
        #[arg(long, value_delimiter = ',', default_values_t = [0.01, 0.05, 0.1, 0.5, 1.0, 5.0, 10.0])]
        betas: Vec<f64>,
        #[arg(long, value_enum, default_value_t = Gnlm::Both)]
        gnlm: Gnlm,
    },
    /// Print a config with every field at its default.
    InitConfig {
        /// Emit a small synthetic experiment instead of the reference one.
        #[arg(long)]
        synthetic: bool,
        /// Write to this file instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(run: &RunArgs) -> CliResult<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&run.config)?;
    if let Some(seed) = run.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &run.out {
        cfg.out_dir = out.clone();
    }
    cfg.resolved()
}

fn run(cli: Cli) -> CliResult<()> {
    let log = Log { quiet: cli.quiet };
    match cli.command {
        Command::Convert { source, out, seed } => {
            let c = cmd_convert(&source, &out, seed)?;
            println!(
                "records {}  train {}  val {}  test {}  classes {}  channels {}  length {}  padded {}  truncated {}",
                c.records, c.train, c.val, c.test, c.num_classes, c.channels, c.length, c.padded, c.truncated
            );
        }
        Command::Train(run) => {
            cmd_train(&load(&run)?, log)?;
        }
        Command::Evaluate {
            run,
            checkpoint,
            epsilon,
        } => {
            let mut cfg = load(&run)?;
            if let Some(grid) = epsilon {
                cfg.eval.epsilon_grid = grid;
                cfg = cfg.resolved()?;
            }
            let ckpt = checkpoint.unwrap_or_else(|| cfg.out_dir.join(CHECKPOINT_FILE));
            cmd_evaluate(&cfg, &ckpt, log)?;
        }
        Command::Plot { csv, out, title } => {
            for path in cmd_plot(&csv, out.as_deref(), title.as_deref())? {
                println!("{}", path.display());
            }
        }
        Command::Sweep { run, betas, gnlm } => {
            let choice = match gnlm {
                Gnlm::Off => GnlmChoice::Off,
                Gnlm::On => GnlmChoice::On,
                Gnlm::Both => GnlmChoice::Both,
            };
            let summary = run_sweep(&load(&run)?, &betas, choice, log)?;
            let failed = summary.rows.iter().filter(|r| r.status.starts_with("error")).count();
            println!(
                "cells {}  resumed {}  failed {}  table {}",
                summary.rows.len(),
                summary.resumed,
                failed,
                summary.table.display()
            );
        }
        Command::InitConfig { synthetic, out } => {
            let cfg = if synthetic {
                ExperimentConfig::synthetic_quickstart()
            } else {
                ExperimentConfig::default()
            };
            match out {
                Some(path) => write_new(&path, &cfg.to_json())?,
                None => print!("{}", cfg.to_json()),
            }
        }
    }
    Ok(())
}

fn write_new(path: &Path, text: &str) -> CliResult<()> {
    if path.exists() {
        return Err(CliError::Usage(format!("{} already exists", path.display())));
    }
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
