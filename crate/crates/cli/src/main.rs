//! `geocell`: partitioning, training, sequence models, inference and
//! evaluation from the command line.
//!
//! Exit codes: 0 ok, 1 usage, 2 data, 3 version mismatch, 4 numeric failure.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "geocell", version, about = "Geocell partitioning and photo geolocation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand.
#[derive(Debug, Args)]
pub struct Common {
    /// Output directory; nothing is written elsewhere.
    #[arg(long)]
    pub out: PathBuf,
    /// TOML config file. Flags override it; it overrides defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build an adaptive cell partition from a JSONL dataset.
    BuildPartition(commands::BuildPartitionArgs),
    /// Drop test records that are near-duplicates of training records.
    Dedup(commands::DedupArgs),
    /// Generate a synthetic album corpus, split into train and test.
    GenSynthetic(commands::GenSyntheticArgs),
    /// Train a single-image classifier over partition cells.
    Train(commands::TrainArgs),
    /// Train an album LSTM on top of a frozen single-image model.
    TrainSeq(commands::TrainSeqArgs),
    /// Write the top-k cells for every photo.
    Infer(commands::InferArgs),
    /// Threshold accuracies, top-k curves and per-category medians.
    Eval(commands::EvalArgs),
    /// Occlusion sensitivity map for one photo.
    Heatmap(commands::HeatmapArgs),
    /// Full synthetic experiment with a hash manifest.
    EndToEnd(commands::EndToEndArgs),
}

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError { code: 1, message: message.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<geocell::Error> for CliError {
    fn from(e: geocell::Error) -> Self {
        use geocell::Error as E;
        let code = match &e {
            E::Config(_) | E::InvalidLevel { .. } => 1,
            E::VersionMismatch(_) => 3,
            E::Numeric(_) => 4,
            _ => 2,
        };
        CliError { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError { code: 2, message: e.to_string() }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError { code: 2, message: e.to_string() }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::BuildPartition(a) => commands::build_partition(a),
        Command::Dedup(a) => commands::dedup(a),
        Command::GenSynthetic(a) => commands::gen_synthetic(a),
        Command::Train(a) => commands::train(a),
        Command::TrainSeq(a) => commands::train_seq(a),
        Command::Infer(a) => commands::infer(a),
        Command::Eval(a) => commands::eval(a),
        Command::Heatmap(a) => commands::heatmap(a),
        Command::EndToEnd(a) => commands::end_to_end(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
