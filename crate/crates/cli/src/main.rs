mod config;
mod error;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use alphachain_core::llm::BackendKind;
use clap::{Parser, Subcommand, ValueEnum};

use config::{Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "alphachain", version, about = "Mine, combine and backtest formulaic alpha factors")]
struct Cli {
    /// TOML run configuration; synthetic defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for the synthetic panel and the chain RNG.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    backend: Option<Backend>,
    /// Total completion attempts for mining.
    #[arg(long, global = true)]
    budget: Option<u64>,
    /// Optimization chains run concurrently.
    #[arg(long, global = true)]
    parallel: Option<usize>,
    /// Append every backend exchange to this JSON-lines file.
    #[arg(long, global = true)]
    transcript: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Backend {
    Http,
    Mock,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic panel CSV.
    Synth,
    /// Run the generation and optimization chains into a factor pool.
    Mine,
    /// Pick the top effective factors from the pool.
    Select,
    /// Fit the combiner and write composite predictions.
    Train,
    /// Backtest the composite on the test period.
    Backtest,
    /// Write the summary metrics table.
    Report,
    /// Every stage in order.
    RunAll,
}

fn run(cli: Cli) -> Result<(), error::CliError> {
    let overrides = Overrides {
        seed: cli.seed,
        output_dir: cli.output_dir,
        backend: cli.backend.map(|b| match b {
            Backend::Http => BackendKind::Http,
            Backend::Mock => BackendKind::Mock,
        }),
        budget: cli.budget,
        parallel: cli.parallel,
    };
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    let transcript = cli.transcript.as_deref();
    match cli.command {
        Command::Synth => pipeline::synth(&cfg),
        Command::Mine => pipeline::mine(&cfg, transcript),
        Command::Select => pipeline::select(&cfg),
        Command::Train => pipeline::train_stage(&cfg),
        Command::Backtest => pipeline::backtest(&cfg),
        Command::Report => pipeline::report(&cfg),
        Command::RunAll => pipeline::run_all(&cfg, transcript),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.kind());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
