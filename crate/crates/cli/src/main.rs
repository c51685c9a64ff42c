//! `robust-ralm`: run experiments, generate training corpora, build reports
//! and snapshot retrieval indexes.
//!
//! Exit codes: 0 success, 1 input or configuration error, 2 backend error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tracing::Level;

#[derive(Debug, Parser)]
#[command(name = "robust-ralm", version, about = "Retrieval-robust Self-Ask question answering")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Answer a dataset and write scored run records.
    Run(RunArgs),
    /// Generate a fine-tuning corpus.
    Gendata(GendataArgs),
    /// Aggregate run records into score tables and robustness deltas.
    Report(ReportArgs),
    /// Snapshot search results for a list of questions into an index file.
    BuildIndex(BuildIndexArgs),
}

/// Flags shared by `run` and `gendata`; each overrides the config file.
#[derive(Debug, Args, Clone, Default)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long)]
    pub dataset_file: Option<PathBuf>,
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long)]
    pub prompts_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Noise tier: top1, lowrank, random or mix.
    #[arg(long)]
    pub tier: Option<String>,
    #[arg(long)]
    pub generator_url: Option<String>,
    #[arg(long)]
    pub generator_transcript: Option<PathBuf>,
    /// Also write every generation to this transcript file.
    #[arg(long)]
    pub record_transcript: Option<PathBuf>,
}

#[derive(Debug, Args, Clone, Default)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Prompt variant: sa-nr, sa-r@1, sa-r@10 or sa-rmix.
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub no_retrieval: bool,
    /// Back off to the no-retrieval answer unless the evidence entails it.
    #[arg(long)]
    pub nli_gate: bool,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub nli_url: Option<String>,
    #[arg(long)]
    pub nli_transcript: Option<PathBuf>,
    #[arg(long)]
    pub eval_size: Option<usize>,
    /// Record file; events go next to it as `<stem>.events.jsonl`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Clone, Default)]
pub struct GendataArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// single-hop or multi-hop; defaults from the dataset.
    #[arg(long)]
    pub kind: Option<String>,
    /// gold-intermediate or self-consistency.
    #[arg(long)]
    pub mode: Option<String>,
    /// Maximum number of questions in the corpus.
    #[arg(long)]
    pub budget: Option<usize>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args, Clone)]
pub struct ReportArgs {
    /// Run record files.
    #[arg(required = true)]
    pub records: Vec<PathBuf>,
    #[arg(long, default_value = "report")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args, Clone)]
pub struct BuildIndexArgs {
    /// Questions: plain lines or JSON lines with a `question` field.
    #[arg(long)]
    pub questions: PathBuf,
    #[arg(long)]
    pub backend_url: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub num: usize,
    /// web (site-restricted query) or local.
    #[arg(long, default_value = "web")]
    pub corpus: String,
    #[arg(long)]
    pub api_key_env: Option<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => Level::WARN,
        1 => Level::INFO,
        _ => Level::DEBUG,
    };
    tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(std::io::stderr)
        .init();

    let result = match cli.command {
        Command::Run(a) => commands::run(&a),
        Command::Gendata(a) => commands::gendata(&a),
        Command::Report(a) => commands::report(&a),
        Command::BuildIndex(a) => commands::build_index(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
