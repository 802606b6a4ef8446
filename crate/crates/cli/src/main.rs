//! `sphereflow`: train, evaluate and sample continuous normalizing flows on
//! spheres.
//!
//! Exit codes: 0 on success, 2 for usage and configuration errors, 3 for
//! numeric failures (including failed self-checks).

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "sphereflow", version, about = "Continuous normalizing flows on hyperspheres")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by all subcommands. Each one overrides the config key of
/// the same name and can also be set through `SPHEREFLOW_<NAME>`.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML config file.
    #[arg(long, global = true, env = "SPHEREFLOW_CONFIG")]
    pub config: Option<PathBuf>,
    /// Output directory for `train`, output file for the other commands.
    #[arg(long, global = true, env = "SPHEREFLOW_OUT")]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, env = "SPHEREFLOW_SEED")]
    pub seed: Option<u64>,
    /// Worker threads; 0 or unset uses all cores.
    #[arg(long, global = true, env = "SPHEREFLOW_THREADS")]
    pub threads: Option<usize>,
    #[arg(long, global = true, env = "SPHEREFLOW_EPOCHS")]
    pub epochs: Option<usize>,
    /// RK4 steps over the unit time interval.
    #[arg(long, global = true, env = "SPHEREFLOW_STEPS")]
    pub steps: Option<usize>,
    #[arg(long, global = true, env = "SPHEREFLOW_GRAD_MODE", value_parser = ["adjoint", "discretize"])]
    pub grad_mode: Option<String>,
    /// Request deterministic reductions (always in effect; recorded in the
    /// manifest).
    #[arg(long, global = true, env = "SPHEREFLOW_DETERMINISTIC")]
    pub deterministic: bool,
    /// Target mixture file (TOML); defaults to the built-in benchmark.
    #[arg(long, global = true, env = "SPHEREFLOW_TARGET")]
    pub target: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a flow and write checkpoint, metrics and manifest.
    Train {
        /// Continue from a checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Report KL divergence and effective sample size of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 20_000)]
        samples: usize,
    },
    /// Draw model samples as CSV (`x0,...,xn,log_q`).
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1000)]
        count: usize,
    },
    /// Model log-density on a latitude-longitude grid of S^2 as CSV.
    Grid {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 100)]
        n_lat: usize,
        #[arg(long, default_value_t = 200)]
        n_lon: usize,
    },
    /// Run self-diagnostics and print a pass/fail table.
    Check {
        /// gradients, divergence, flow-laws or all.
        #[arg(default_value = "all")]
        scope: String,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = commands::init_threads(cli.common.threads).and_then(|()| match cli.command {
        Command::Train { resume } => commands::train(&cli.common, resume.as_deref()),
        Command::Eval { checkpoint, samples } => commands::eval(&cli.common, &checkpoint, samples),
        Command::Sample { checkpoint, count } => commands::sample(&cli.common, &checkpoint, count),
        Command::Grid {
            checkpoint,
            n_lat,
            n_lon,
        } => commands::grid(&cli.common, &checkpoint, n_lat, n_lon),
        Command::Check { scope } => commands::check(&cli.common, &scope),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 3 })
        }
    }
}
