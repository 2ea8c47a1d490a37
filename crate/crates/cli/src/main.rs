//! Subcommand front-end wiring the phantom → reconstruction → alignment →
//! dataset → training → evaluation workflow into reproducible runs.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 invalid configuration.

mod commands;
mod manifest;
mod pixmap;

use clap::{Parser, Subcommand};
use std::process::ExitCode;

#[derive(Debug)]
pub enum CliError {
    /// Bad configuration or flags; exit code 2.
    Config(String),
    /// Failure while running; exit code 1.
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

pub fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

pub type CliResult = Result<(), CliError>;

#[derive(Parser)]
#[command(
    name = "plaquemap",
    version,
    about = "Transfer pullback plaque annotations onto straightened CT reformats and train a windowed sequence classifier"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset.
    Synth(commands::synth::Args),
    /// Reconstruct a straightened MPR volume from a CT volume and centerline.
    Mpr(commands::mpr::Args),
    /// Align pullback labels onto MPR slices via reference locations.
    Align(commands::align::Args),
    /// Assemble windowed sequences and cross-validation folds.
    Dataset(commands::dataset::Args),
    /// Train the sequence classifier on one fold split.
    Train(commands::train::Args),
    /// Evaluate a checkpoint on a held-out fold.
    Eval(commands::eval::Args),
    /// Agreement statistics between two label sequences.
    Kappa(commands::kappa::Args),
    /// Run the full chain end to end over cross-validation folds.
    Pipeline(commands::pipeline::Args),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(args) => commands::synth::run(args),
        Command::Mpr(args) => commands::mpr::run(args),
        Command::Align(args) => commands::align::run(args),
        Command::Dataset(args) => commands::dataset::run(args),
        Command::Train(args) => commands::train::run(args),
        Command::Eval(args) => commands::eval::run(args),
        Command::Kappa(args) => commands::kappa::run(args),
        Command::Pipeline(args) => commands::pipeline::run(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
