//! `xfa`: simulate, fit, evaluate and re-tabulate expandable factor models.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod error;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use xfa_core::{Condition, TruthPrior};

use config::{base, set, CommonArgs, RunConfig};
use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "xfa", version, about = "Expandable factor analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Draw a ground truth and a data set.
    Simulate(SimulateArgs),
    /// Fit the grid, average and write every table.
    Fit(FitArgs),
    /// CNNL, CPEV, RMSE and the selected factor count of an estimate.
    Evaluate(EvaluateArgs),
    /// Re-emit weights_surface.csv from a finished fit.
    WeightsSurface(SurfaceArgs),
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    p: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    /// Sample size, defaults to ceil(P ln P).
    #[arg(long)]
    n: Option<usize>,
    /// sparse-high, dense-high, dense-low or sparse-low.
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long)]
    truth_prior: Option<TruthPrior>,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Headerless N x P CSV.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    k_max: Option<usize>,
    /// I, II or III.
    #[arg(long)]
    condition: Option<Condition>,
    /// Comma-separated, strictly descending.
    #[arg(long, value_delimiter = ',')]
    grid_rho: Option<Vec<f64>>,
    /// Comma-separated, strictly ascending, all above 2.
    #[arg(long, value_delimiter = ',')]
    grid_delta: Option<Vec<f64>>,
    /// Credible interval level.
    #[arg(long)]
    level: Option<f64>,
    #[arg(long)]
    max_outer_iters: Option<usize>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    estimate: Option<PathBuf>,
    /// Ground-truth loadings; enables RMSE.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Data the estimate was fitted to; enables CPEV.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Zero entries with |value| <= threshold first.
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Debug, Args)]
struct SurfaceArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Output directory of a previous `xfa fit`.
    #[arg(long)]
    fit_dir: Option<PathBuf>,
}

fn build_config(command: &Command) -> Result<RunConfig, CliError> {
    match command {
        Command::Simulate(a) => {
            let mut cfg = base(&a.common)?;
            set(&mut cfg.p, a.p);
            set(&mut cfg.k, a.k);
            set(&mut cfg.n, a.n);
            set(&mut cfg.scenario, a.scenario.clone());
            set(&mut cfg.truth_prior, a.truth_prior);
            Ok(cfg)
        }
        Command::Fit(a) => {
            let mut cfg = base(&a.common)?;
            set(&mut cfg.data, a.data.clone());
            set(&mut cfg.k_max, a.k_max);
            set(&mut cfg.condition, a.condition);
            set(&mut cfg.grid_rho, a.grid_rho.clone());
            set(&mut cfg.grid_delta, a.grid_delta.clone());
            set(&mut cfg.level, a.level);
            if let Some(iters) = a.max_outer_iters {
                cfg.fit.get_or_insert_with(Default::default).max_outer_iters = iters;
            }
            Ok(cfg)
        }
        Command::Evaluate(a) => {
            let mut cfg = base(&a.common)?;
            set(&mut cfg.estimate, a.estimate.clone());
            set(&mut cfg.truth_loadings, a.truth.clone());
            set(&mut cfg.data, a.data.clone());
            set(&mut cfg.threshold, a.threshold);
            Ok(cfg)
        }
        Command::WeightsSurface(a) => {
            let mut cfg = base(&a.common)?;
            set(&mut cfg.fit_dir, a.fit_dir.clone());
            Ok(cfg)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = build_config(&cli.command)?;
    if let Some(n) = cfg.threads {
        if n == 0 {
            return Err(CliError::input("threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Input(e.into()))?;
    }
    match cli.command {
        Command::Simulate(_) => commands::simulate(&cfg),
        Command::Fit(_) => commands::fit(&cfg),
        Command::Evaluate(_) => commands::evaluate(&cfg),
        Command::WeightsSurface(_) => commands::weights_surface(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
