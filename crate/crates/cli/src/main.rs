//! `seqamp`: configuration-driven experiment runner for sequence
//! multi-index recovery. Each subcommand reads a TOML config, runs one
//! experiment family, and writes a CSV whose comment header echoes the
//! effective configuration, so every output file documents how to
//! regenerate itself.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::UsageError;
use config::ExperimentConfig;

#[derive(Parser)]
#[command(name = "seqamp", version, about = "Sequence multi-index model experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Message-passing recovery runs (fresh teacher and data per run).
    Gamp(RunArgs),
    /// State-evolution sweep over sample ratios.
    Se(RunArgs),
    /// Weak-recovery thresholds at the configured skip strength.
    Threshold(RunArgs),
    /// Weak-recovery thresholds across a grid of skip strengths.
    Phase(RunArgs),
    /// Minibatch SGD baseline over several seeds.
    Sgd(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
    /// Override data.seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker pool size; changes runtime, never results.
    #[arg(long)]
    workers: Option<usize>,
}

fn run(cmd: &Cmd) -> anyhow::Result<()> {
    let args = match cmd {
        Cmd::Gamp(a) | Cmd::Se(a) | Cmd::Threshold(a) | Cmd::Phase(a) | Cmd::Sgd(a) => a,
    };
    if let Some(k) = args.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build_global()
            .map_err(|e| UsageError(format!("cannot size worker pool: {e}")))?;
    }
    let text = std::fs::read_to_string(&args.config).map_err(|e| {
        UsageError(format!("cannot read config {}: {e}", args.config.display()))
    })?;
    let mut cfg =
        ExperimentConfig::load(&text).map_err(|e| UsageError(format!("{e:#}")))?;
    cfg.model().validate().map_err(|e| UsageError(e.to_string()))?;
    if let Some(seed) = args.seed {
        cfg.data.seed = seed;
    }
    match cmd {
        Cmd::Gamp(_) => commands::cmd_gamp(&cfg, &args.out),
        Cmd::Se(_) => commands::cmd_se(&cfg, &args.out),
        Cmd::Threshold(_) => commands::cmd_threshold(&cfg, &args.out),
        Cmd::Phase(_) => commands::cmd_phase(&cfg, &args.out),
        Cmd::Sgd(_) => commands::cmd_sgd(&cfg, &args.out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.chain().any(|c| c.is::<UsageError>()) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
