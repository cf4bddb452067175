use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mbsr::sessions::{InputFormat, Preset, SubsetOrder};
use mbsr::{Execution, Task};

mod commands;
mod config;

use config::ModelFlags;

#[derive(Debug, Parser)]
#[command(name = "mbsr", version, about = "Multi-behavior session-based recommendation pipelines")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic session corpus.
    Synth(SynthArgs),
    /// Filter, split and augment raw sessions.
    Preprocess(PreprocessArgs),
    /// Build the global item-transition graph from the train split.
    BuildGraph(BuildGraphArgs),
    /// Train a model and write its checkpoint and log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a split.
    Eval(EvalArgs),
    /// Score the next item for one session.
    Predict(PredictArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value = "planted_rule")]
    pub preset: Preset,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub seed: u64,
    /// Run directory; receives `sessions.jsonl`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value = "jsonl")]
    pub format: InputFormat,
    /// Run directory for vocabularies and split examples.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub min_session_len: usize,
    #[arg(long, default_value_t = 5)]
    pub min_item_count: u64,
    #[arg(long, default_value_t = 8)]
    pub max_len: usize,
    /// Train, valid, test fractions.
    #[arg(long, value_delimiter = ',', default_values_t = [0.7, 0.1, 0.2])]
    pub ratios: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Keep only this most recent fraction of sessions.
    #[arg(long)]
    pub subset_fraction: Option<f64>,
    #[arg(long, default_value = "filter_after_subset")]
    pub subset_order: SubsetOrder,
    /// Allowed behavior labels, comma separated; others are rejected.
    #[arg(long, value_delimiter = ',')]
    pub behaviors: Option<Vec<String>>,
}

#[derive(Debug, Args)]
pub struct BuildGraphArgs {
    /// Output directory of `preprocess`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 12)]
    pub neighbor_cap: usize,
    #[arg(long, default_value = "parallel")]
    pub execution: Execution,
    /// Run directory; receives `graph.tsv`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub graph: PathBuf,
    /// Run directory for the config echo, log and checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Defaults to the task the checkpoint was trained for.
    #[arg(long)]
    pub task: Option<Task>,
    /// Ranking cutoff.
    #[arg(long, default_value_t = mbsr::eval::DEFAULT_K)]
    pub k: usize,
    #[arg(long, default_value = "parallel")]
    pub execution: Execution,
    /// Also write `report.csv`.
    #[arg(long)]
    pub csv: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub graph: PathBuf,
    /// One session (JSON object or TSV event lines); `-` reads stdin.
    #[arg(long, default_value = "-")]
    pub input: String,
    #[arg(long, default_value = "jsonl")]
    pub format: InputFormat,
    #[arg(long)]
    pub task: Option<Task>,
    /// Behavior label of the next event; required for task1.
    #[arg(long)]
    pub next_behavior: Option<String>,
    #[arg(long, default_value_t = mbsr::eval::DEFAULT_K)]
    pub top_k: usize,
}

/// Argument combinations clap cannot express; reported like clap's own errors.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Preprocess(a) => commands::preprocess(&a),
        Command::BuildGraph(a) => commands::build_graph(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Predict(a) => commands::predict(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}\n\nFor more information, try '--help'.");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
