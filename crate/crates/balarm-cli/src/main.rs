//! `balarm` command-line tool.
//!
//! Subcommands cover the full pipeline: `ingest` turns a contact-event log
//! into an edge panel, `simulate` draws synthetic panels from a model file,
//! `fit` estimates a mixture by EM, `sweep` scans model orders by BIC,
//! `bootstrap` produces parametric confidence bands, `curves` tabulates
//! fitted daily profiles, and `diagnose` runs goodness-of-fit checks.
//!
//! All file outputs are written atomically and are byte-identical across
//! runs and `--threads` settings for a fixed seed. Exit codes: 0 success,
//! 2 invalid input or configuration, 3 numerical failure, 4 I/O failure.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use balarm::BalarmError;

#[derive(Debug, Parser)]
#[command(name = "balarm", version, about = "Mixtures of logistic autoregressive binary time series", max_term_width = 100)]
struct Cli {
    /// Number of worker threads (default: one per core).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Aggregate a timestamped contact log into a binary edge panel.
    Ingest(commands::IngestArgs),
    /// Draw a synthetic edge panel from a model file.
    Simulate(commands::SimulateArgs),
    /// Fit a mixture model to an edge panel by EM.
    Fit(commands::FitArgs),
    /// Fit a grid of model orders and rank them by BIC.
    Sweep(commands::SweepArgs),
    /// Parametric bootstrap bands for the fitted daily curves.
    Bootstrap(commands::BootstrapArgs),
    /// Tabulate per-cluster daily probability and autocorrelation curves.
    Curves(commands::CurvesArgs),
    /// Run residual and independence diagnostics against a panel.
    Diagnose(commands::DiagnoseArgs),
}

/// Maps library errors onto the documented exit codes.
fn exit_code(err: &BalarmError) -> u8 {
    match err {
        BalarmError::InvalidSpec(_)
        | BalarmError::InvalidParams(_)
        | BalarmError::InvalidPanel(_)
        | BalarmError::DimensionMismatch(_)
        | BalarmError::Parse { .. }
        | BalarmError::InsufficientData(_) => 2,
        BalarmError::NonConvergence(_) | BalarmError::Singular(_) => 3,
        BalarmError::Io(_) | BalarmError::Format(_) => 4,
    }
}

fn run(cli: Cli) -> Result<(), BalarmError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(BalarmError::InvalidParams("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| BalarmError::InvalidParams(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Ingest(args) => commands::ingest(args),
        Command::Simulate(args) => commands::simulate(args),
        Command::Fit(args) => commands::fit(args),
        Command::Sweep(args) => commands::sweep(args),
        Command::Bootstrap(args) => commands::bootstrap(args),
        Command::Curves(args) => commands::curves(args),
        Command::Diagnose(args) => commands::diagnose(args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}

/// Shared CLI pieces used by several subcommands.
#[derive(Debug, Clone, clap::Args)]
pub struct CommonFitArgs {
    /// TOML configuration file (keys: G, K, H, P, seed, tol, restarts, B, ridge).
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Random seed (default 0).
    #[arg(long)]
    pub seed: Option<u64>,

    /// EM convergence tolerance on the log-likelihood improvement.
    #[arg(long)]
    pub tol: Option<f64>,

    /// Number of EM restarts.
    #[arg(long)]
    pub restarts: Option<usize>,

    /// Ridge penalty applied to non-intercept coefficients.
    #[arg(long)]
    pub ridge: Option<f64>,
}
