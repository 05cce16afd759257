//! `citl` — experiment harness for conformal-in-the-loop training.
//!
//! Subcommands: `generate` (datasets), `run` (one training/baseline run),
//! `grid` (alpha x noise x seed sweeps), `sidecar` (offline conformal
//! analysis of a probability dump), `report` (figure data CSVs).
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 numeric abort
//! (partial telemetry preserved), 3 grid finished with failed cells.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod dataset_io;
mod outputs;
mod probs_io;

#[derive(Parser)]
#[command(
    name = "citl",
    about = "Conformal-in-the-loop training lab",
    version,
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset directory from a spec file.
    Generate {
        /// Path to the dataset spec (JSON).
        #[arg(long)]
        spec: PathBuf,
        /// Output root (defaults to $CITL_OUT_ROOT or ./citl-out).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Execute one training or baseline run from a config file.
    Run {
        /// Path to the run config (JSON).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also dump best-model validation probabilities for the sidecar.
        #[arg(long)]
        dump_val_probs: bool,
    },
    /// Run an alpha x noise x seed grid and summarize it.
    Grid {
        /// Path to the plan file (JSON).
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads (default: plan setting or 2).
        #[arg(long)]
        parallelism: Option<usize>,
    },
    /// Conformal analysis of an externally produced probability dump.
    Sidecar {
        /// Path to the probability dump (JSON lines).
        #[arg(long)]
        dump: PathBuf,
        /// Miscoverage tolerance in (0, 1).
        #[arg(long)]
        alpha: f64,
        /// Score function: lac or aps (default: the dump header's method).
        #[arg(long)]
        method: Option<String>,
        /// Fraction of the dump used as the calibration prefix.
        #[arg(long, default_value_t = 0.5)]
        calib_fraction: f64,
        /// Exact calibration prefix size (overrides --calib-fraction).
        #[arg(long)]
        calib_count: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Emit tidy figure CSVs from one or more finished runs.
    Report {
        /// Run directories produced by `citl run` or `citl grid`.
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // Help/version requests are success; anything else is usage.
            let code = if err.use_stderr() { 1 } else { 0 };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Generate { spec, out } => commands::generate::run(&spec, out.as_deref()),
        Command::Run {
            config,
            out,
            dump_val_probs,
        } => commands::run::run(&config, out.as_deref(), dump_val_probs),
        Command::Grid {
            plan,
            out,
            parallelism,
        } => commands::grid::run(&plan, out.as_deref(), parallelism),
        Command::Sidecar {
            dump,
            alpha,
            method,
            calib_fraction,
            calib_count,
            out,
        } => commands::sidecar::run(
            &dump,
            alpha,
            method.as_deref(),
            calib_fraction,
            calib_count,
            out.as_deref(),
        ),
        Command::Report { runs, out } => commands::report::run(&runs, out.as_deref()),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}
