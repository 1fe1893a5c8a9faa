//! `gmclab`: batch driver for field synthesis, chaos statistics and the acceptance suite.

mod commands;
mod config;
mod record;

use clap::{Parser, Subcommand};
use config::{ConfigError, ExperimentConfig};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "gmclab", version, about = "Log-correlated fields and complex multiplicative chaos experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Kernel functionals and normalization constants for each γ.
    Constants,
    /// Export an ensemble of fields.
    Synthesize,
    /// Stable-convergence characteristic-function test.
    LimitTest,
    /// Bracket against intensity on the same replicas.
    QvTest,
    /// Second-moment exponents over the γ list.
    ScanPhase,
    /// Fourier-side tightness diagnostics.
    Tightness,
    /// Kernel approximation and remainder positivity.
    Decompose,
    /// Run the acceptance suite.
    Accept,
}

#[derive(Clone, Debug, clap::Args)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    replicas: Option<usize>,
    /// Output directory; relative paths resolve against $GMCLAB_OUT if set.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

const EXIT_FAILED: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let Some(path) = cli.common.config.as_ref() else {
        eprintln!("config error: --config is required");
        return ExitCode::from(EXIT_CONFIG);
    };
    let mut cfg = match ExperimentConfig::load(path) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    if let Some(s) = cli.common.seed {
        cfg.seed = s;
    }
    if let Some(r) = cli.common.replicas {
        cfg.replicas = r;
    }
    if let Err(e) = cfg.validate() {
        eprintln!("{e}");
        return ExitCode::from(EXIT_CONFIG);
    }
    let out = match &cli.common.out {
        Some(o) => config::resolve_output(o),
        None => cfg.output_dir(),
    };
    match commands::run(cli.command, &cfg, &out) {
        Ok(outcome) => {
            for p in &outcome.files {
                println!("wrote {}", p.display());
            }
            if outcome.pass == Some(false) {
                eprintln!("one or more checks failed");
                ExitCode::from(EXIT_FAILED)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::from(EXIT_RUNTIME)
            }
        }
    }
}
