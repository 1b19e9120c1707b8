//! Command-line experiments: training runs, quadrature sweeps, SNR
//! simulations, gradient checks and adaptive-vs-fixed comparisons.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::ffi::OsString;

use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod svg;

/// Environment variable bounding the worker threads of seed sweeps.
pub const WORKERS_ENV: &str = "IGU_LORA_WORKERS";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {key}: {msg}")]
    Config { key: String, msg: String },

    #[error("run diverged: {0}")]
    Diverged(String),

    #[error("oracle failure: {0}")]
    Oracle(String),

    #[error(transparent)]
    Run(#[from] igu_lora::Error),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl CliError {
    /// 0 success, 1 configuration (or other) error, 2 diverged, 3 oracle failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Diverged(_) => 2,
            CliError::Oracle(_) => 3,
            CliError::Config { .. } | CliError::Run(_) | CliError::Io(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "igu-lora", version, about = "Adaptive-rank LoRA with integrated-gradient SNR scoring")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on the configured task and write report.json, ranks.csv and scores.csv.
    Train(TrainArgs),
    /// Quadrature error scaling, sampling spread and bound coverage.
    QuadSweep(QuadArgs),
    /// Monte-Carlo stability of the EMA signal-to-noise score.
    SnrSim(SnrArgs),
    /// Finite-difference gradient oracle.
    GradCheck(GradArgs),
    /// Adaptive against fixed-rank training over several seeds.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    pub config: std::path::PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: std::path::PathBuf,
    /// Also render SVG charts.
    #[arg(long)]
    pub svg: bool,
}

#[derive(Debug, Args)]
pub struct QuadArgs {
    #[arg(long, value_delimiter = ',', default_value = "2,4,8,16,32,64")]
    pub n_list: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "4,16,64")]
    pub m_list: Vec<usize>,
    /// Seeds for the sampling spread and coverage trials.
    #[arg(long, default_value_t = 200)]
    pub seeds: usize,
    /// Seed of the network, adapter and batch pool.
    #[arg(long, default_value_t = 0)]
    pub setup_seed: u64,
    #[arg(long, default_value_t = 20)]
    pub n_quad: usize,
    /// Batches per aggregate in the coverage trials.
    #[arg(long, default_value_t = 16)]
    pub coverage_m: usize,
    #[arg(long, default_value_t = 4096)]
    pub n_ref: usize,
    #[arg(long)]
    pub out: std::path::PathBuf,
    #[arg(long)]
    pub svg: bool,
}

#[derive(Debug, Args)]
pub struct SnrArgs {
    #[arg(long, value_delimiter = ',', default_value = "0.5,0.85,0.97")]
    pub betas: Vec<f64>,
    #[arg(long, default_value_t = 1.0)]
    pub mu: f64,
    #[arg(long, default_value_t = 0.2)]
    pub sigma: f64,
    #[arg(long, default_value_t = 200)]
    pub reps: usize,
    #[arg(long, default_value_t = 1000)]
    pub steps: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: std::path::PathBuf,
    #[arg(long)]
    pub svg: bool,
}

#[derive(Debug, Args)]
pub struct GradArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub configs: usize,
    /// Test hook: offset added to one analytic gradient entry per check.
    #[arg(long, default_value_t = 0.0, hide = true)]
    pub inject_fault: f64,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub config: std::path::PathBuf,
    /// Baseline methods; only `fixed-lora` is available.
    #[arg(long, value_delimiter = ',', default_value = "fixed-lora")]
    pub baselines: Vec<String>,
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    #[arg(long)]
    pub out: std::path::PathBuf,
}

/// Sizes the global thread pool from [`WORKERS_ENV`] when set.
pub fn configure_workers() -> Result<(), CliError> {
    let Ok(v) = std::env::var(WORKERS_ENV) else {
        return Ok(());
    };
    let n: usize = v.trim().parse().map_err(|_| CliError::Config {
        key: WORKERS_ENV.into(),
        msg: format!("expected a positive integer, got {v:?}"),
    })?;
    // A pool built earlier in the same process is kept.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    Ok(())
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = configure_workers().and_then(|()| match &cli.command {
        Command::Train(a) => commands::cmd_train(a),
        Command::QuadSweep(a) => commands::cmd_quad_sweep(a),
        Command::SnrSim(a) => commands::cmd_snr_sim(a),
        Command::GradCheck(a) => commands::cmd_grad_check(a),
        Command::Compare(a) => commands::cmd_compare(a),
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("igu-lora: {e}");
            e.exit_code()
        }
    }
}
