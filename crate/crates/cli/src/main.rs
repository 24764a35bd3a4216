//! `graphreason`: data generation, adaptation tuning, adapter fine-tuning,
//! retrieval, evaluation and inference from the command line.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

mod commands;
mod config;
mod selftest;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::TrainSection;

/// Marks errors caused by how the program was invoked.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Parser, Debug)]
#[command(
    name = "graphreason",
    version,
    about = "Subgraph-aware Transformer KGQA"
)]
pub struct Cli {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    /// Only warnings and errors.
    #[arg(short, long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a QA dataset (JSON lines) from a KG file or a synthetic KG.
    GenData(GenDataArgs),
    /// Full-parameter adaptation tuning of a fresh encoder.
    Adapt(AdaptArgs),
    /// Adapter-only fine-tuning for reasoning or relation retrieval.
    Finetune(FinetuneArgs),
    /// Retrieve a subgraph per question from the full KG.
    Retrieve(RetrieveArgs),
    /// Hits@1 and F1 of the reasoning model on a dataset.
    Eval(EvalArgs),
    /// Answer one question: retrieve, then reason.
    Infer(InferArgs),
    /// Quick internal consistency checks.
    Selftest,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Validation,
    Test,
}

impl From<SplitArg> for graphreason::Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => graphreason::Split::Train,
            SplitArg::Validation => graphreason::Split::Validation,
            SplitArg::Test => graphreason::Split::Test,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FinetuneTask {
    Reason,
    Retrieve,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Tab-separated `head relation tail` file.
    #[arg(
        long,
        conflicts_with = "synthetic",
        required_unless_present = "synthetic"
    )]
    pub kg: Option<PathBuf>,
    /// Generate a random typed KG from the [synthetic] section.
    #[arg(long)]
    pub synthetic: bool,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub samples: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub min_hops: Option<usize>,
    #[arg(long)]
    pub max_hops: Option<usize>,
    #[arg(long)]
    pub entity_budget: Option<usize>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
    /// Fraction of highest-degree entities used as topics.
    #[arg(long)]
    pub topic_quantile: Option<f64>,
    /// Put every record in this split instead of train/validation.
    #[arg(long, value_enum)]
    pub split: Option<SplitArg>,
    /// `id<TAB>question` lines replacing templated questions.
    #[arg(long)]
    pub questions: Option<PathBuf>,
    /// Also write the KG used (TSV plus entities.txt / relations.txt).
    #[arg(long)]
    pub save_kg: Option<PathBuf>,
    #[arg(long)]
    pub entities: Option<usize>,
    #[arg(long)]
    pub relations: Option<usize>,
    #[arg(long)]
    pub kg_seed: Option<u64>,
}

#[derive(Args, Debug, Default)]
pub struct ModelArgs {
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub adapter_width: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Index graph positions from the start of the graph segment.
    #[arg(long)]
    pub separate_graph_positions: Option<bool>,
}

#[derive(Args, Debug, Default)]
pub struct TrainArgs {
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub eval_interval: Option<usize>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    /// F1 threshold as a fraction of the top probability.
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl TrainArgs {
    pub fn section(&self) -> TrainSection {
        TrainSection {
            lr: self.lr,
            batch_size: self.batch_size,
            epochs: self.epochs,
            patience: self.patience,
            eval_interval: self.eval_interval,
            weight_decay: self.weight_decay,
            clip_norm: self.clip_norm,
            tau: self.tau,
            max_negatives: None,
        }
    }
}

#[derive(Args, Debug, Default)]
pub struct RetrievalArgs {
    /// Relations kept per expanded entity.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub max_hops: Option<usize>,
    #[arg(long)]
    pub entity_cap: Option<usize>,
}

#[derive(Args, Debug)]
pub struct AdaptArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Output model directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Let graph tokens attend to the whole graph segment.
    #[arg(long)]
    pub no_structural_mask: bool,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    #[arg(long, value_enum)]
    pub task: FinetuneTask,
    #[arg(long)]
    pub data: PathBuf,
    /// Adapted model directory to start from.
    #[arg(
        long,
        required_unless_present = "skip_adapt",
        conflicts_with = "skip_adapt"
    )]
    pub model: Option<PathBuf>,
    /// Start from a freshly initialized encoder instead of an adapted one.
    #[arg(long)]
    pub skip_adapt: bool,
    #[arg(long)]
    pub out: PathBuf,
    /// Full KG; required for retrieval fine-tuning.
    #[arg(long)]
    pub kg: Option<PathBuf>,
    #[arg(long)]
    pub no_structural_mask: bool,
    #[arg(long)]
    pub max_negatives: Option<usize>,
    #[arg(long)]
    pub max_hops: Option<usize>,
    #[command(flatten)]
    pub model_args: ModelArgs,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Args, Debug)]
pub struct RetrieveArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub kg: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Records with retrieved subgraphs (JSON lines).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub split: Option<SplitArg>,
    /// Write the summary as JSON here as well.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[command(flatten)]
    pub retrieval: RetrievalArgs,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub split: Option<SplitArg>,
    #[arg(long)]
    pub tau: Option<f64>,
    /// Adapter set to evaluate with; `base` for none. Defaults to the
    /// reasoning adapter when present.
    #[arg(long)]
    pub adapter: Option<String>,
    /// Full JSON report with per-sample rows.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub kg: PathBuf,
    #[arg(long)]
    pub question: String,
    /// Topic entity label (repeatable).
    #[arg(long, required = true)]
    pub topic: Vec<String>,
    /// Entries of the score table to print.
    #[arg(long, default_value_t = 5)]
    pub top: usize,
    #[command(flatten)]
    pub retrieval: RetrievalArgs,
}

fn init_logging(cli: &Cli) {
    let level = if cli.quiet {
        "warn"
    } else {
        match cli.verbose {
            0 => "info",
            1 => "debug",
            _ => "trace",
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    init_logging(&cli);
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
