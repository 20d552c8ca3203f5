//! Operator CLI: table building, self-checks, training, sampling, and the
//! fixed-NFE predictor-corrector sweep. Every command writes a run manifest
//! next to its outputs and can be replayed bit-for-bit with `replay`.
//!
//! Exit codes: 0 success, 1 internal/check failure, 2 invalid configuration.

mod commands;
mod manifest;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "sphereflow",
    version,
    about = "Flow-based discrete-sequence generation on product spheres"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build and write the velocity-scalar and radial-CDF tables
    Tables(TablesArgs),
    /// Run the numerical self-check suites
    Selfcheck(SelfcheckArgs),
    /// Train a posterior model on a desk-scale task
    Train(TrainArgs),
    /// Generate sequences from a checkpoint or the exact oracle
    Sample(SampleArgs),
    /// Predictor-corrector sweep at fixed NFE = 128
    Sweep(SweepArgs),
    /// Re-run a recorded manifest
    Replay(ReplayArgs),
}

#[derive(Args)]
struct TablesArgs {
    /// Embedding dimension (>= 3)
    #[arg(long, default_value_t = 3)]
    d: usize,
    /// Terminal concentration
    #[arg(long, default_value_t = 50.0)]
    kappa_max: f64,
    /// Cosine-axis grid points
    #[arg(long, default_value_t = 512)]
    n_mu: usize,
    /// Concentration-axis grid points
    #[arg(long, default_value_t = 512)]
    n_kappa: usize,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SelfcheckArgs {
    /// Which suite to run
    #[arg(long, default_value = "all")]
    suite: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the JSONL report here
    #[arg(long)]
    out: Option<PathBuf>,
    /// Mutation hook: negate the velocity scalar before the psi suite
    /// (must fail; used to validate the check itself)
    #[arg(long, hide = true, default_value_t = false)]
    inject_psi_sign_flip: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Task: synthetic | mini-sudoku
    #[arg(long, default_value = "synthetic")]
    task: String,
    /// Conditional path: vmf | geodesic | vp | ve
    #[arg(long, default_value = "vmf")]
    path: String,
    /// Feed the normalized schedule parameter to the backbone
    #[arg(long, default_value_t = false)]
    time_conditioned: bool,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    warp_bins: Option<usize>,
    #[arg(long)]
    kappa_max: Option<f64>,
    #[arg(long)]
    sigma_max: Option<f64>,
    /// Embedding dimension (defaults: 3 synthetic, 6 mini-sudoku)
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    ema_decay: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// JSON file with defaults (flags take precedence)
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SampleArgs {
    /// Trained checkpoint to sample from
    #[arg(long, conflicts_with = "oracle")]
    ckpt: Option<PathBuf>,
    /// Use the exact enumerating posterior on the tiny synthetic task
    #[arg(long, default_value_t = false)]
    oracle: bool,
    /// Task providing sequence shape and conditioning: synthetic | mini-sudoku
    #[arg(long)]
    task: Option<String>,
    /// Predictor steps
    #[arg(long)]
    n: Option<usize>,
    /// Corrector steps per predictor step
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long, default_value_t = false)]
    warp_aware: bool,
    #[arg(long, default_value_t = false)]
    damping: bool,
    /// SDE diffusion coefficient; > 0 selects the SDE sampler
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Oracle terminal concentration
    #[arg(long)]
    kappa_max: Option<f64>,
    /// JSON file with defaults (flags take precedence)
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, conflicts_with = "oracle")]
    ckpt: Option<PathBuf>,
    #[arg(long, default_value_t = false)]
    oracle: bool,
    #[arg(long)]
    task: Option<String>,
    /// Comma-separated corrector step sizes
    #[arg(long)]
    eps_grid: Option<String>,
    /// Append the saturation point (epsilon = 2) to the grid
    #[arg(long, default_value_t = false)]
    include_saturation: bool,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker thread cap
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    kappa_max: Option<f64>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReplayArgs {
    /// Manifest to re-run
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory for the replayed run
    #[arg(long)]
    out: PathBuf,
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Tables(a) => commands::tables::run(a),
        Command::Selfcheck(a) => commands::selfcheck::run(a),
        Command::Train(a) => commands::train::run(a),
        Command::Sample(a) => commands::sample::run(a),
        Command::Sweep(a) => commands::sweep::run(a),
        Command::Replay(a) => commands::replay(a),
    };
    if let Err(err) = result {
        eprintln!("error: {:#}", err);
        std::process::exit(exit_code(&err));
    }
}

/// 2 for configuration errors, 1 for everything else.
fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<sphereflow::Error>() {
            use sphereflow::Error::*;
            if matches!(
                e,
                InvalidConfig(_)
                    | ScoreUnavailable { .. }
                    | ProgressUnavailable { .. }
                    | InstanceTooLarge { .. }
            ) {
                return 2;
            }
        }
        if cause.downcast_ref::<commands::ConfigError>().is_some() {
            return 2;
        }
    }
    1
}
