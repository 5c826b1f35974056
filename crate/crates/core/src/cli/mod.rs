//! Batch experiment runner behind the `cbdom` binary.

pub mod config;
pub mod runner;
pub mod selftest;

use std::path::PathBuf;

use clap::Parser;
use log::{error, info};

pub use config::{Command, ConfigError, ExperimentConfig};
pub use runner::{run, Outcome, RunError, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_OK};

pub const THREADS_ENV: &str = "CBDOM_THREADS";

#[derive(Debug, Parser)]
#[command(name = "cbdom", version, about = "Sparse domination and matrix-weight experiments on dyadic grids")]
pub struct Args {
    /// Experiment config (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides the config's `output`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads, 0 for automatic; falls back to CBDOM_THREADS.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Replaces the config's `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub verbose: bool,
}

/// Thread count from the flag, then the environment; `None` means automatic.
fn thread_count(flag: Option<usize>) -> Result<Option<usize>, ConfigError> {
    let n = match flag {
        Some(n) => n,
        None => match std::env::var(THREADS_ENV) {
            Ok(s) => s.trim().parse().map_err(|_| ConfigError::Field {
                field: THREADS_ENV.into(),
                message: format!("`{s}` is not a thread count"),
            })?,
            Err(_) => 0,
        },
    };
    Ok((n > 0).then_some(n))
}

/// Runs one experiment and returns the process exit code.
pub fn main_with(args: Args) -> i32 {
    let level = if args.verbose { "info" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match execute(&args) {
        Ok(outcome) => {
            for f in &outcome.files {
                info!("wrote {}", f.display());
            }
            if outcome.passed {
                println!("ok: {}", outcome.summary);
            } else {
                error!("check failed: {}", outcome.summary);
                println!("failed: {}", outcome.summary);
            }
            outcome.exit_code()
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute(args: &Args) -> Result<Outcome, RunError> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(n) = thread_count(args.threads)? {
        // Only the first call can size the global pool; later runs in the
        // same process keep it.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let out = args
        .out
        .clone()
        .or_else(|| cfg.output.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    info!("running {:?} into {}", cfg.command, out.display());
    run(&cfg, &out)
}
