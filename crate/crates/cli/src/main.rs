use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};

mod artifacts;
mod commands;

/// Vocabulary pruning, PCA embedding compression and logit distillation for
/// small intent classifiers.
#[derive(Debug, Parser)]
#[command(name = "vprune", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Grow a labeled corpus with generated utterances.
    Augment(AugmentArgs),
    /// Select the task vocabulary, build the remap table and fit PCA.
    Prune(PruneArgs),
    /// Train the student classifier against teacher logits.
    Distill(DistillArgs),
    /// Print parameter counts and compression ratios.
    Report(ReportArgs),
    /// Tokenize text lines into id sequences.
    Tokenize(TokenizeArgs),
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("source").required(true).args(["endpoint", "offline_file"])))]
pub struct AugmentArgs {
    /// JSON-lines corpus of {"text", "label"} objects.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Where to write the augmented JSON-lines corpus.
    #[arg(long)]
    pub out: PathBuf,
    /// Completion endpoint URL.
    #[arg(long)]
    pub endpoint: Option<String>,
    /// File of pre-generated completions, one per line.
    #[arg(long)]
    pub offline_file: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    pub per_intent: usize,
    #[arg(long, default_value_t = 128)]
    pub max_tokens: u32,
    #[arg(long, default_value_t = 30)]
    pub timeout_secs: u64,
    /// Environment variable holding the bearer credential.
    #[arg(long, default_value = vprune_core::augment::DEFAULT_API_KEY_ENV)]
    pub api_key_env: String,
}

#[derive(Debug, Args)]
pub struct PruneArgs {
    #[arg(long)]
    pub vocab: PathBuf,
    /// VPEM embedding matrix aligned with the vocabulary.
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Corpus files whose union drives token frequencies (repeatable).
    #[arg(long, required = true)]
    pub corpus: Vec<PathBuf>,
    /// Content tokens to keep.
    #[arg(long, default_value_t = 2000)]
    pub k: usize,
    /// PCA target dimension.
    #[arg(long, default_value_t = 400)]
    pub pca_dim: usize,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LossOrderArg {
    TeacherRef,
    StudentRef,
}

#[derive(Debug, Args)]
pub struct DistillArgs {
    #[arg(long)]
    pub vocab: PathBuf,
    /// Corpus files, concatenated in order; rows align with the teacher logits.
    #[arg(long, required = true)]
    pub corpus: Vec<PathBuf>,
    /// VPEM matrix of teacher logits, one row per utterance.
    #[arg(long)]
    pub teacher_logits: PathBuf,
    /// JSON sidecar {"labels": [...]}; defaults to the logits path plus ".json".
    #[arg(long)]
    pub teacher_labels: Option<PathBuf>,
    /// Output directory of `vprune prune`.
    #[arg(long)]
    pub prune_dir: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = vprune_core::distill::DEFAULT_TEMPERATURE)]
    pub temperature: f64,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Weight of the hard-label cross-entropy term.
    #[arg(long, default_value_t = 0.0)]
    pub ce_weight: f64,
    #[arg(long, value_enum, default_value_t = LossOrderArg::TeacherRef)]
    pub loss_order: LossOrderArg,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Model config JSON, or the preset `bert-base`.
    #[arg(long, default_value = "bert-base")]
    pub before: String,
    /// Model config JSON, or the preset `bert-base-compressed`.
    #[arg(long, default_value = "bert-base-compressed")]
    pub after: String,
    /// Print the JSON report instead of the table.
    #[arg(long)]
    pub json: bool,
    /// Also write the JSON report to this path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TokenizeArgs {
    #[arg(long)]
    pub vocab: PathBuf,
    /// Remap JSON from `vprune prune`; ids are then printed in pruned space.
    #[arg(long)]
    pub remap: Option<PathBuf>,
    /// Input text file; standard input when absent.
    #[arg(long)]
    pub input: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Augment(a) => commands::augment(&a),
        Command::Prune(a) => commands::prune(&a),
        Command::Distill(a) => commands::distill(&a),
        Command::Report(a) => commands::report(&a),
        Command::Tokenize(a) => commands::tokenize(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(commands::exit_code(&err))
        }
    }
}
