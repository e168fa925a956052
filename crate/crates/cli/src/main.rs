//! `trinas`: screen, search, decode, retrain and evaluate detector
//! architectures on the synthetic detection task.

mod commands;
mod config;
mod lock;
mod report;
mod selftest;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{Overrides, Profile};

/// Exit codes. Usage errors from argument parsing also exit with 2.
pub mod exit {
    pub const OK: u8 = 0;
    pub const CONFIG: u8 = 2;
    pub const DATA: u8 = 3;
    pub const NUMERICAL: u8 = 4;
    pub const MISSING: u8 = 5;
    pub const LOCKED: u8 = 6;
    pub const OTHER: u8 = 1;
}

/// CLI-level failures that carry their own exit class.
#[derive(Debug)]
pub enum Failure {
    Config(String),
    Missing { path: PathBuf, hint: String },
    Locked(PathBuf),
    Selftest(String),
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "configuration error: {m}"),
            Failure::Missing { path, hint } => write!(f, "missing {}: {hint}", path.display()),
            Failure::Locked(p) => write!(
                f,
                "output directory is in use: {} exists (remove it if no other run is active)",
                p.display()
            ),
            Failure::Selftest(m) => write!(f, "selftest failed: {m}"),
        }
    }
}

impl std::error::Error for Failure {}

fn exit_code(err: &anyhow::Error) -> u8 {
    use trinity_nas::Error as E;
    for cause in err.chain() {
        if let Some(f) = cause.downcast_ref::<Failure>() {
            return match f {
                Failure::Config(_) => exit::CONFIG,
                Failure::Missing { .. } => exit::MISSING,
                Failure::Locked(_) => exit::LOCKED,
                Failure::Selftest(_) => exit::NUMERICAL,
            };
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Config(_) | E::Parse(_) => exit::CONFIG,
                E::Data(_) | E::Split(_) | E::Format(_) | E::Json(_) | E::Csv(_) => exit::DATA,
                E::Numerical(_) | E::Tensor(_) => exit::NUMERICAL,
                E::Io(_) => exit::MISSING,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return exit::MISSING;
        }
    }
    exit::OTHER
}

#[derive(Debug, Parser)]
#[command(name = "trinas", version, about = "Backbone, neck and head architecture search on a toy detection task")]
struct Cli {
    /// TOML run configuration (see `run_config.toml` in any output directory).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Preset the configuration starts from.
    #[arg(long, global = true, value_enum)]
    profile: Option<Profile>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides `out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override any key, e.g. `--set search.lambda=0.1`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Shrink the full catalogue to per-component sub spaces.
    Screen,
    /// Differentiable search over the sub spaces.
    Search {
        /// Use the published sub spaces instead of `spaces.txt`.
        #[arg(long)]
        appendix: bool,
    },
    /// Argmax-decode a supernet checkpoint into `architecture.txt`.
    Decode {
        /// Defaults to `<out>/supernet.json`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train the decoded architecture on the search pool.
    Train {
        /// Defaults to `<out>/architecture.txt`.
        #[arg(long)]
        architecture: Option<PathBuf>,
        /// Start from the supernet's weights for the chosen ops.
        #[arg(long)]
        inherit_weights: bool,
    },
    /// Test-split metrics of the trained detector.
    Eval {
        /// Also retrain `train.random_baselines` random architectures.
        #[arg(long)]
        baseline: bool,
    },
    /// Per-layer cost table of the sub spaces or of one architecture.
    Flops {
        #[arg(long)]
        appendix: bool,
        #[arg(long)]
        architecture: Option<PathBuf>,
        /// Report 2×MACs (multiply and add counted separately).
        #[arg(long)]
        double: bool,
    },
    /// Collate the run's CSV and JSON artifacts into `report.md`.
    Report,
    /// Finite-difference, brute-force convolution and FLOPs oracles.
    Selftest,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if matches!(cli.command, Command::Selftest) {
        return selftest::run();
    }
    let env: Vec<(String, String)> = std::env::vars().collect();
    let overrides = Overrides {
        profile: cli.profile,
        seed: cli.seed,
        out_dir: cli.out,
        set: cli.set,
    };
    let cfg = config::resolve(cli.config.as_deref(), &env, &overrides)?;
    trinity_nas::parallel::set_parallel(cfg.parallel);
    std::fs::create_dir_all(&cfg.out_dir)?;
    let _lock = lock::OutputLock::acquire(&cfg.out_dir)?;
    std::fs::write(cfg.out_dir.join("run_config.toml"), cfg.to_toml())?;
    commands::dispatch(&cfg, &cli.command)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::from(exit::OK),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
