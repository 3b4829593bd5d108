//! `nsgvd`: synthetic data, NSG features, kernel training, detection and
//! Monte Carlo bound checks from one executable.
//!
//! Exit codes: 0 success, 1 invalid configuration, 2 bad or missing data,
//! 3 a verification check failed.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nsg_core::detector::DetectError;
use nsg_core::kernel::KernelError;
use nsg_core::mmd::MmdError;
use nsg_core::nsg::NsgError;
use nsg_core::synth::SynthError;
use nsg_core::theory::TheoryError;

use crate::commands::VerificationFailed;
use crate::config::{ConfigError, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "nsgvd", version, about = "NSG-based generated-video detection toolkit")]
struct Cli {
    /// INI-style config file (`[section]` headers, `key = value`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set nsg.lambda=0.2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Shorthand for `--set out=DIR`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Shorthand for `--set threads=N`; 1 gives bit-reproducible runs.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthetic Gaussian video processes.
    #[command(subcommand)]
    Synth(SynthCmd),
    /// NSG feature extraction.
    #[command(subcommand)]
    Nsg(NsgCmd),
    /// Deep-kernel training.
    #[command(subcommand)]
    Kernel(KernelCmd),
    /// Score test features against a reference set and report metrics.
    Detect,
    /// Monte Carlo checks of the concentration and distance bounds.
    #[command(subcommand)]
    Theory(TheoryCmd),
    /// Print every config key with its default and description.
    Config,
}

#[derive(Debug, Subcommand)]
enum SynthCmd {
    /// Write videos, oracle scores and a manifest.
    Gen,
}

#[derive(Debug, Subcommand)]
enum NsgCmd {
    /// Turn (video, score) pairs into feature tensors.
    Extract,
}

#[derive(Debug, Subcommand)]
enum KernelCmd {
    /// Train the deep kernel on labeled features.
    Train,
}

#[derive(Debug, Subcommand)]
enum TheoryCmd {
    /// Run the selected check families.
    Verify,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() || cause.is::<SynthError>() {
            return 1;
        }
        if cause.is::<VerificationFailed>() {
            return 3;
        }
        if let Some(e) = cause.downcast_ref::<TheoryError>() {
            return match e {
                TheoryError::Conditioning { .. } => 3,
                _ => 1,
            };
        }
        let config = matches!(cause.downcast_ref::<NsgError>(), Some(NsgError::Config(_)))
            || matches!(cause.downcast_ref::<MmdError>(), Some(MmdError::Config(_)))
            || matches!(cause.downcast_ref::<DetectError>(), Some(DetectError::Config(_)))
            || matches!(cause.downcast_ref::<KernelError>(), Some(KernelError::Invalid(_)));
        if config {
            return 1;
        }
    }
    2
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut overrides = cli.overrides;
    if let Some(s) = cli.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(o) = cli.out {
        overrides.push(format!("out={}", o.display()));
    }
    if let Some(t) = cli.threads {
        overrides.push(format!("threads={t}"));
    }
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;

    if let Command::Config = cli.command {
        print!("{}", RunConfig::default().render());
        return Ok(());
    }
    let threads: usize = cfg.get("threads")?;
    if threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| ConfigError(format!("threads: {e}")))?;
    }
    match cli.command {
        Command::Synth(SynthCmd::Gen) => commands::synth_gen(&cfg),
        Command::Nsg(NsgCmd::Extract) => commands::nsg_extract(&cfg),
        Command::Kernel(KernelCmd::Train) => commands::kernel_train(&cfg),
        Command::Detect => commands::detect(&cfg),
        Command::Theory(TheoryCmd::Verify) => commands::theory_verify(&cfg),
        Command::Config => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Some library errors already quote their source; print each text once.
            let mut msg = String::new();
            for cause in e.chain().map(ToString::to_string) {
                if !msg.contains(&cause) {
                    if !msg.is_empty() {
                        msg.push_str(": ");
                    }
                    msg.push_str(&cause);
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(exit_code(&e))
        }
    }
}
