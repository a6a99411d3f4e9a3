//! `lsrlab`: command-line driver for the learned sparse retrieval pipeline.
//!
//! Exit status: 0 success, 1 usage error, 2 data error, 3 numeric divergence.

mod artifact;
mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Diverged(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Diverged(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Diverged(m) => f.write_str(m),
        }
    }
}

impl From<lsrlab::Error> for CliError {
    fn from(e: lsrlab::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

fn parse_kv(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected key=value, got {s:?}"))
}

#[derive(Debug, Parser)]
#[command(name = "lsrlab", version, about = "Learned sparse retrieval lab", propagate_version = true)]
struct Cli {
    /// Worker threads for parallel encoding, indexing and evaluation.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// TOML experiment configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Configuration override, e.g. `--set train.lr=0.01`. Repeatable.
    #[arg(long = "set", global = true, value_parser = parse_kv)]
    set: Vec<(String, String)>,

    /// Random seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Serialize, Args)]
pub struct SynthArgs {
    /// Directory receiving subvocab.tsv, train.jsonl, queries.jsonl, docs.jsonl and titles.txt.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Serialize, Args)]
pub struct BuildVocabArgs {
    #[arg(long)]
    pub subvocab: PathBuf,
    /// One title per line.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub size: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Serialize, Args)]
pub struct InitEmlmArgs {
    #[arg(long)]
    pub subvocab: PathBuf,
    #[arg(long)]
    pub uvocab: PathBuf,
    /// Checkpoint with a subword-level head; randomly initialized when absent.
    #[arg(long)]
    pub base: Option<PathBuf>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Serialize, Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub init: PathBuf,
    #[arg(long)]
    pub subvocab: PathBuf,
    #[arg(long)]
    pub uvocab: PathBuf,
    /// One title per line.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-step loss log (JSONL).
    #[arg(long)]
    pub log: PathBuf,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Clone, Serialize, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub init: PathBuf,
    #[arg(long)]
    pub subvocab: PathBuf,
    #[arg(long)]
    pub uvocab: PathBuf,
    /// JSONL of {"query": ..., "doc": ...} pairs.
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-step loss log (JSONL).
    #[arg(long)]
    pub log: PathBuf,
    /// Validation queries (JSONL); enables best-checkpoint selection.
    #[arg(long, requires_all = ["valid_docs", "best_out", "eval_log"])]
    pub valid_queries: Option<PathBuf>,
    #[arg(long, requires = "valid_queries")]
    pub valid_docs: Option<PathBuf>,
    /// Best-R@10 checkpoint.
    #[arg(long, requires = "valid_queries")]
    pub best_out: Option<PathBuf>,
    /// Validation log (JSONL).
    #[arg(long, requires = "valid_queries")]
    pub eval_log: Option<PathBuf>,
    #[command(flatten)]
    pub train_flags: TrainFlags,
}

#[derive(Debug, Clone, Serialize, Args)]
pub struct EncodeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub subvocab: PathBuf,
    #[arg(long)]
    pub uvocab: PathBuf,
    /// JSONL with `text` and one of `doc_id`, `query_id` or `id`.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Serialize, Args)]
pub struct IndexArgs {
    /// Document vectors.
    #[arg(long)]
    pub vectors: PathBuf,
    /// Keep each document's top-dk terms (0 keeps all).
    #[arg(long)]
    pub dk: Option<usize>,
    /// Expanded vocabulary the vectors were encoded with, recorded in the index.
    #[arg(long)]
    pub uvocab: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Serialize, Args)]
pub struct SearchArgs {
    #[arg(long)]
    pub index: PathBuf,
    /// Query vectors.
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long)]
    pub qk: Option<usize>,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Serialize, Args)]
pub struct FlopsArgs {
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long)]
    pub qk: Option<usize>,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Args)]
pub struct EvalArgs {
    /// Model checkpoint; omit with --bm25.
    #[arg(long, required_unless_present = "bm25")]
    pub model: Option<PathBuf>,
    #[arg(long, required_unless_present = "bm25")]
    pub subvocab: Option<PathBuf>,
    #[arg(long, required_unless_present = "bm25")]
    pub uvocab: Option<PathBuf>,
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long)]
    pub docs: PathBuf,
    /// Comma-separated qk:dk cells.
    #[arg(long, default_value = "0:0,5:10,5:20")]
    pub grid: String,
    /// Evaluate the BM25 baseline instead of a model.
    #[arg(long, conflicts_with = "model")]
    pub bm25: bool,
    /// Include per-query metrics.
    #[arg(long)]
    pub per_query: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic click dataset.
    Synth(SynthArgs),
    /// Build the expanded unigram vocabulary from a title corpus.
    BuildVocab(BuildVocabArgs),
    /// Build an expanded-vocabulary head by averaging subword head rows.
    InitEmlm(InitEmlmArgs),
    /// Masked-LM pretraining over the expanded vocabulary.
    Pretrain(PretrainArgs),
    /// Ranking finetuning with sparsity regularization.
    Finetune(FinetuneArgs),
    /// Encode texts into sparse vectors.
    Encode(EncodeArgs),
    /// Build an inverted index from document vectors.
    Index(IndexArgs),
    /// Retrieve the top-k documents for each query vector.
    Search(SearchArgs),
    /// Report the expected floating-point operations per query-document pair.
    Flops(FlopsArgs),
    /// Evaluate a checkpoint over a (qk, dk) grid.
    Eval(EvalArgs),
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let mut overrides = cli.set.clone();
    if let Some(seed) = cli.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    let cfg = |extra: Vec<(&str, Option<String>)>| {
        let mut all = overrides.clone();
        all.extend(extra.into_iter().filter_map(|(k, v)| v.map(|v| (k.to_string(), v))));
        config::load(cli.config.as_deref(), &all)
    };
    let train_overrides = |t: &TrainFlags| {
        vec![
            ("train.total_steps", t.steps.map(|v| v.to_string())),
            ("train.lr", t.lr.map(|v| format!("{v:?}"))),
            ("train.batch_size", t.batch_size.map(|v| v.to_string())),
        ]
    };
    match &cli.command {
        Command::Synth(a) => commands::synth(a, &cfg(vec![])?),
        Command::BuildVocab(a) => commands::build_vocab(a, &cfg(vec![])?),
        Command::InitEmlm(a) => commands::init_emlm(a, &cfg(vec![("model.hidden", a.hidden.map(|h| h.to_string()))])?),
        Command::Pretrain(a) => commands::pretrain(a, &cfg(train_overrides(&a.train))?),
        Command::Finetune(a) => commands::finetune(a, &cfg(train_overrides(&a.train_flags))?),
        Command::Encode(a) => commands::encode(a, &cfg(vec![])?),
        Command::Index(a) => commands::index(a, &cfg(vec![("prune.dk", a.dk.map(|v| v.to_string()))])?),
        Command::Search(a) => commands::search(a, &cfg(vec![("prune.qk", a.qk.map(|v| v.to_string()))])?),
        Command::Flops(a) => commands::flops(a, &cfg(vec![("prune.qk", a.qk.map(|v| v.to_string()))])?),
        Command::Eval(a) => commands::eval(a, &cfg(vec![])?),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
