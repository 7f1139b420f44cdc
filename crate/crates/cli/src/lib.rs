//! Command surface for `layerprune`.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error.

pub mod artifacts;
pub mod config;
pub mod report;
pub mod search;
pub mod tools;

use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use config::OperatorMode;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn into_anyhow(self) -> anyhow::Error {
        match self {
            CliError::Usage(m) => anyhow::anyhow!("usage error: {m}"),
            CliError::Runtime(e) => e,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(e) => write!(f, "error: {e:#}"),
        }
    }
}

impl<E: Into<anyhow::Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Runtime(e.into())
    }
}

#[derive(Debug, Parser)]
#[command(name = "layerprune", version, about = "Search layer-wise structured pruning rates")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded random model in SPRN1 format.
    GenModel(GenModelArgs),
    /// Write a seeded synthetic token corpus.
    GenCorpus(GenCorpusArgs),
    /// Run the evolutionary search.
    Search(Box<SearchArgs>),
    /// Prune a model to a configuration.
    Prune(PruneArgs),
    /// Perplexity of a model on a corpus.
    Eval(EvalArgs),
    /// Summarize a finished search directory.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenModelArgs {
    #[arg(long)]
    pub layers: usize,
    #[arg(long)]
    pub d_model: usize,
    #[arg(long)]
    pub heads: usize,
    #[arg(long)]
    pub d_ff: usize,
    #[arg(long)]
    pub vocab: usize,
    #[arg(long, default_value_t = 128)]
    pub max_seq_len: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenCorpusArgs {
    #[arg(long)]
    pub vocab: usize,
    #[arg(long)]
    pub tokens: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Default)]
pub struct SearchArgs {
    /// Key-value run configuration; flags override its entries.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Calibration corpus for activation statistics.
    #[arg(long)]
    pub calib: Option<PathBuf>,
    /// Corpus scored during the search (defaults to the calibration corpus).
    #[arg(long)]
    pub fitness_corpus: Option<PathBuf>,
    /// Held-out corpus used by `report` (defaults to the fitness corpus).
    #[arg(long)]
    pub report_corpus: Option<PathBuf>,
    /// Name of the pruned model as written into prompts.
    #[arg(long)]
    pub model_name: Option<String>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long, short = 'k')]
    pub population_size: Option<usize>,
    #[arg(long, short = 'm')]
    pub mutations: Option<usize>,
    #[arg(long, short = 's')]
    pub crossovers: Option<usize>,
    #[arg(long, short = 'n')]
    pub generations: Option<u32>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub seq_len: Option<usize>,
    /// Concurrent fitness evaluations.
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long, value_enum)]
    pub operator: Option<OperatorMode>,
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub llm_model: Option<String>,
    /// Environment variable holding the endpoint credential.
    #[arg(long)]
    pub api_key_env: Option<String>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub max_tokens: Option<usize>,
    /// Transcript to serve responses from in replay mode.
    #[arg(long)]
    pub replay_transcript: Option<PathBuf>,
    /// Random initial population instead of the operator's.
    #[arg(long)]
    pub no_llm_init: bool,
    #[arg(long)]
    pub no_mutation: bool,
    #[arg(long)]
    pub no_crossover: bool,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Continue from the latest checkpoint in the output directory.
    #[arg(long)]
    pub resume: bool,
    /// Stop after this many generations, leaving a resumable checkpoint.
    #[arg(long)]
    pub stop_after: Option<u32>,
    /// Base retry delay in milliseconds for endpoint calls.
    #[arg(long, hide = true)]
    pub retry_base_ms: Option<u64>,
}

#[derive(Debug, Args)]
pub struct PruneArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub calib: PathBuf,
    /// JSON with `rates` and `beta` (e.g. a search's best_config.json).
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub seq_len: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub seq_len: usize,
    /// Also write the JSON result here.
    #[arg(long)]
    pub json_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub run_dir: PathBuf,
    /// Throughput probe length in tokens.
    #[arg(long, default_value_t = 512)]
    pub bench_tokens: usize,
    #[arg(long, default_value_t = 5)]
    pub bench_repeats: usize,
}

pub fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenModel(a) => tools::gen_model(&a),
        Command::GenCorpus(a) => tools::gen_corpus(&a),
        Command::Search(a) => search::cmd_search(&a).map(|_| ()),
        Command::Prune(a) => tools::prune(&a),
        Command::Eval(a) => tools::eval(&a),
        Command::Report(a) => report::cmd_report(&a).map(|_| ()),
    }
}
