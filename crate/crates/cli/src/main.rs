//! hashkit: train deep hash models, encode image sets into binary codes,
//! and benchmark Hamming-space retrieval.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;
mod error;

use commands::SplitPart;

#[derive(Parser)]
#[command(
    name = "hashkit",
    version,
    about = "Deep-hash image retrieval: train, encode, search, evaluate"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train hash models, one checkpoint and log per run
    Train(TrainArgs),
    /// Encode a manifest into a code database with a trained checkpoint
    Encode(EncodeArgs),
    /// Rank database codes by Hamming distance for every query
    Retrieve(RetrieveArgs),
    /// Score a query database against a code database (mAP@k)
    Evaluate(EvaluateArgs),
    /// Draw a benchmark split and save it
    Split(SplitArgs),
    /// Generate a synthetic dataset and write images plus manifest
    Synth(SynthArgs),
}

#[derive(clap::Args)]
pub struct TrainArgs {
    /// experiment config file (TOML)
    #[arg(long)]
    pub config: PathBuf,
    /// overrides [train] seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// output directory for checkpoints and logs
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// config override, dotted.key=value (repeatable)
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(clap::Args)]
pub struct EncodeArgs {
    /// trained checkpoint to encode with
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// dataset manifest to encode
    #[arg(long)]
    pub manifest: PathBuf,
    /// split file restricting which samples are encoded
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// split part to encode (defaults to database when --split is given)
    #[arg(long, value_enum)]
    pub part: Option<SplitPart>,
    /// fold the train part into the database part
    #[arg(long)]
    pub include_train_in_db: bool,
    /// fail unless the checkpoint produces codes of this length
    #[arg(long, value_name = "BITS")]
    pub expect_k: Option<usize>,
    /// output database file
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(clap::Args)]
pub struct RetrieveArgs {
    /// code database to search
    #[arg(long)]
    pub db: PathBuf,
    /// query code database
    #[arg(long)]
    pub queries: PathBuf,
    /// results per query
    #[arg(long, default_value_t = 10)]
    pub top_k: usize,
}

#[derive(clap::Args)]
pub struct EvaluateArgs {
    /// code database to search
    #[arg(long)]
    pub db: PathBuf,
    /// query code database
    #[arg(long)]
    pub queries: PathBuf,
    /// mAP ranking depth (defaults to the value recorded at encode time)
    #[arg(long)]
    pub map_k: Option<usize>,
    /// report file; a rendered table lands next to it
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(clap::Args)]
pub struct SplitArgs {
    /// experiment config file (TOML)
    #[arg(long)]
    pub config: PathBuf,
    /// overrides [split] seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// output split file
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// config override, dotted.key=value (repeatable)
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(clap::Args)]
pub struct SynthArgs {
    /// experiment config file (TOML)
    #[arg(long)]
    pub config: PathBuf,
    /// overrides the synthetic dataset seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// output dataset directory
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// config override, dotted.key=value (repeatable)
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(args) => commands::cmd_train(args),
        Command::Encode(args) => commands::cmd_encode(args),
        Command::Retrieve(args) => commands::cmd_retrieve(args),
        Command::Evaluate(args) => commands::cmd_evaluate(args),
        Command::Split(args) => commands::cmd_split(args),
        Command::Synth(args) => commands::cmd_synth(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
