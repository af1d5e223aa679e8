//! `defbias`: ingest corpora, filter, render prompts, probe models, score,
//! measure agreement and export reward-weighted training data.
//!
//! Exit status: 0 success, 2 usage error, 3 input error, 4 runtime error.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "defbias",
    version,
    about = "Definition-bias probing and bias-aware reward export"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// Flat TOML file with defaults for any setting below.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random draw in the run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory receiving artifacts and the run manifest.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Worker threads for parallel stages.
    #[arg(long, global = true)]
    pub parallelism: Option<usize>,
    /// Print a machine-readable summary on stdout.
    #[arg(long, global = true)]
    pub json: bool,
    /// Extra dataset registry (JSON) added to the bundled one.
    #[arg(long, global = true)]
    pub registry: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Convert a corpus to canonical JSONL.
    Ingest(IngestArgs),
    /// Keep candidate sentences similar to a target dataset.
    Filter(FilterArgs),
    /// Render prompt instances for one dataset.
    Prompts(PromptsArgs),
    /// Send prompts to a model (or replay recorded completions).
    Probe(ProbeArgs),
    /// Micro-F1 of predictions against gold annotations.
    Score(ScoreArgs),
    /// Cross-dataset matrix with diagonal-relative values.
    Matrix(MatrixArgs),
    /// Fleiss' kappa between annotation sources.
    Kappa(KappaArgs),
    /// Reward-weighted stage-1 training export.
    Rewards(RewardsArgs),
    /// Write the default two-stage training configurations.
    StageConfigs,
    /// Load recorded completions into the response cache.
    CacheImport(CacheImportArgs),
    /// Re-hash a run manifest's inputs and outputs.
    VerifyManifest(VerifyArgs),
}

#[derive(Args, Debug)]
pub struct IngestArgs {
    /// Registered dataset name, nickname or alias.
    #[arg(long)]
    pub name: String,
    #[arg(long, default_value = "canonical-jsonl")]
    pub format: String,
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub valid: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Drop undeclared labels instead of failing.
    #[arg(long)]
    pub permissive: bool,
    /// Extra label mapping, SOURCE=label (repeatable).
    #[arg(long = "map", value_name = "SOURCE=LABEL")]
    pub label_map: Vec<String>,
    /// Output file name (default: <dataset slug>.jsonl).
    #[arg(long)]
    pub output: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EmbedderKind {
    Hash,
    Http,
}

#[derive(Args, Debug)]
pub struct FilterArgs {
    #[arg(long)]
    pub candidates: PathBuf,
    #[arg(long)]
    pub candidates_name: Option<String>,
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long)]
    pub target_name: Option<String>,
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Split of the target used as reference sentences.
    #[arg(long, default_value = "train")]
    pub ref_split: String,
    #[arg(long, value_enum, default_value = "hash")]
    pub embedder: EmbedderKind,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long)]
    pub embed_model: Option<String>,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PromptsArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Cases to sample; 0 renders the whole split.
    #[arg(long)]
    pub sample: Option<usize>,
    #[arg(long)]
    pub shots: Option<usize>,
    /// Demonstration pool (default: the training split of --data).
    #[arg(long)]
    pub train_pool: Option<PathBuf>,
    /// true, nickname, fake or none.
    #[arg(long, default_value = "none")]
    pub source: String,
    /// One zero-shot instruction per label type.
    #[arg(long)]
    pub decompose: bool,
}

#[derive(Args, Debug)]
pub struct ProbeArgs {
    #[arg(long)]
    pub prompts: PathBuf,
    #[arg(long)]
    pub model: Option<String>,
    /// Serve from the cache only; never call the network.
    #[arg(long)]
    pub replay: bool,
    /// Recorded completions to import into the cache first.
    #[arg(long)]
    pub recordings: Option<PathBuf>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub max_tokens: Option<u32>,
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ScoreArgs {
    #[arg(long)]
    pub gold: PathBuf,
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long)]
    pub pred: PathBuf,
    /// Label of the system that produced the predictions.
    #[arg(long, default_value = "model")]
    pub train: String,
    /// Restrict scoring to these types (default: all declared).
    #[arg(long = "scope", value_delimiter = ',')]
    pub scope: Vec<String>,
    #[arg(long, default_value = "report.json")]
    pub output: String,
}

#[derive(Args, Debug)]
pub struct MatrixArgs {
    /// Evaluation report JSON files (repeatable).
    #[arg(long = "report")]
    pub reports: Vec<PathBuf>,
    /// TSV grid of published F1 points (first column: train dataset).
    #[arg(long, conflicts_with = "reports")]
    pub grid: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum KappaMode {
    Dataset,
    Type,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PolicyArg {
    Exact,
    Span,
}

#[derive(Args, Debug)]
pub struct KappaArgs {
    #[arg(long, value_enum)]
    pub mode: KappaMode,
    #[arg(long)]
    pub gold: PathBuf,
    #[arg(long)]
    pub name: Option<String>,
    /// Prediction files (repeatable); dataset mode takes exactly one.
    #[arg(long = "pred", required = true)]
    pub preds: Vec<PathBuf>,
    /// Shared type for type mode.
    #[arg(long = "type")]
    pub shared_type: Option<String>,
    #[arg(long, value_enum, default_value = "exact")]
    pub policy: PolicyArg,
}

#[derive(Args, Debug)]
pub struct RewardsArgs {
    /// Canonical JSONL datasets (repeatable).
    #[arg(long = "in", required = true)]
    pub inputs: Vec<PathBuf>,
    /// Dataset name when a single input's file name does not identify it.
    #[arg(long)]
    pub name: Option<String>,
    /// Reference constants overriding the bundled ones.
    #[arg(long)]
    pub constants: Option<PathBuf>,
    #[arg(long)]
    pub samples: Option<usize>,
    /// Refuse types without a measured kappa instead of falling back.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Args, Debug)]
pub struct CacheImportArgs {
    #[arg(long)]
    pub recordings: PathBuf,
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    pub manifest: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e.source);
            ExitCode::from(e.kind.code())
        }
    }
}
