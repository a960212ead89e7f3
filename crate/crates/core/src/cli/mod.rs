//! Batch interface: config parsing, panel ingestion and sample construction,
//! and the run pipeline behind the `latentdid` binary.
//!
//! Exit codes: 0 success, 2 configuration error, 3 estimation failure, 4 I/O error.

pub mod config;
pub mod panel;
pub mod run;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::Parser;
use thiserror::Error;

pub use config::{AnalysisKind, RunConfig};
pub use panel::{build_stacked, build_staggered_cohort, ingest, LongPanel};
pub use run::{execute, run, RunOutput};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Estimation(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Estimation(_) => 3,
            CliError::Io(_) => 4,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Estimation(_) => "estimation",
            CliError::Io(_) => "io",
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "latentdid", version, about = "Panel treatment effects without parallel trends")]
pub struct Args {
    /// Run configuration file.
    #[arg(long)]
    pub config: PathBuf,
    /// Replaces `[output] seed`.
    #[arg(long)]
    pub seed_override: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub verbose: bool,
}

fn run_args(args: &Args) -> Result<(), CliError> {
    if let Some(n) = args.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("cannot set threads: {e}")))?;
    }
    let mut config = RunConfig::from_file(&args.config)?;
    if let Some(seed) = args.seed_override {
        config.seed = seed;
    }
    run(&config, args.verbose)?;
    Ok(())
}

/// Entry point of the binary; returns the process exit code.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args = match Args::try_parse_from(argv) {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run_args(&args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: kind={} exit={}\nmessage: {e}", e.kind(), e.exit_code());
            e.exit_code()
        }
    }
}
