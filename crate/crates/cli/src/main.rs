//! `beamcast`: data generation, training, evaluation and inspection.
//!
//! Every subcommand reads a flat `key = value` config (`--config`) with
//! `--set key=value` overrides applied on top; unknown keys are rejected.
//! Exit codes: 0 success, 1 usage, 2 data or config error, 3 runtime failure.

mod commands;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use failure::Failure;

#[derive(Debug, Parser)]
#[command(name = "beamcast", version, about = "mmWave beam prediction workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Config file of `key = value` lines.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one config key; applied after the file, repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out", value_name = "DIR")]
    out: PathBuf,
    /// Upper bound on parallel scenario / trajectory workers.
    #[arg(long, global = true, value_name = "N")]
    workers: Option<usize>,
    /// Also write whitespace-separated plot columns (suite).
    #[arg(long, global = true)]
    emit_plotdata: bool,
    /// Print progress to standard error.
    #[arg(short, long, global = true)]
    verbose: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate trajectories; writes trajectories.json and per-trajectory trace CSVs.
    Simulate,
    /// Window traces into a BPDS dataset file.
    Dataset,
    /// Train the forecaster or the LSTM baseline on a dataset.
    Train {
        #[arg(default_value = "forecaster", value_parser = ["forecaster", "lstm"])]
        model: String,
    },
    /// Evaluate one predictor on the test scenario set.
    Eval,
    /// Run an experiment suite.
    Suite {
        #[arg(value_parser = [
            "velocity", "scenario-mismatch", "frequency-mismatch",
            "antenna", "variable-ablation", "component-ablation",
        ])]
        name: String,
    },
    /// Closed-loop tracking with periodic re-measurement.
    Track,
    /// Print the prompt text and token ids for one window.
    InspectPrompt,
    /// Validate an external `slot,opt_beam,aod_rad` CSV trace.
    Ingest { input: PathBuf },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("beamcast: {f}");
            ExitCode::from(f.code())
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(Failure::Usage("--workers must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    let kv = commands::load_config(cli.config.as_deref(), &cli.sets)?;
    let ctx = commands::Context {
        out: cli.out,
        plotdata: cli.emit_plotdata,
        verbose: cli.verbose,
    };
    match cli.command {
        Command::Simulate => commands::simulate(kv, &ctx),
        Command::Dataset => commands::dataset(kv, &ctx),
        Command::Train { model } => commands::train(&model, kv, &ctx),
        Command::Eval => commands::eval(kv, &ctx),
        Command::Suite { name } => commands::suite(&name, kv, &ctx),
        Command::Track => commands::track(kv, &ctx),
        Command::InspectPrompt => commands::inspect_prompt(kv),
        Command::Ingest { input } => commands::ingest(&input, kv, &ctx),
    }
}
