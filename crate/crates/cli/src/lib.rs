//! Command-line orchestration of the retrieval pipeline.

pub mod commands;
pub mod data;
pub mod manifest;
pub mod qa;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use parallax_core::retriever::Ablation;
use serde::Serialize;

use crate::data::{SplitArg, TraversalArg};

/// Exit status for bad flags or configuration.
pub const EXIT_CONFIG: u8 = 2;
/// Exit status for unreadable or inconsistent input data.
pub const EXIT_DATA: u8 = 3;
/// Exit status for failures while running.
pub const EXIT_RUNTIME: u8 = 4;

#[derive(Debug, Parser)]
#[command(name = "parallax", version, about = "Multi-view knowledge-graph retrieval toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic benchmark dataset.
    GenSynth(GenSynthArgs),
    /// Validate a graph and query file, annotate gold paths and normalise them.
    Ingest(IngestArgs),
    /// Train a retriever.
    Train(TrainArgs),
    /// Write the top-k triples per query.
    Retrieve(RetrieveArgs),
    /// Retrieval recall by hop, a head-analysis run log and optional QA scores.
    Eval(EvalArgs),
    /// Per-head contribution, use and hit rates plus the step probe.
    AnalyzeHeads(AnalyzeArgs),
    /// Triple-difference intervention on specialist heads.
    Ddd(DddArgs),
    /// Train and compare the full model with its four ablations.
    Ablate(AblateArgs),
    /// Train and evaluate the full model over several PSR strengths.
    BetaSweep(BetaSweepArgs),
    /// Serve a local chat-completions mock endpoint.
    ServeMock(ServeMockArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct GenSynthArgs {
    /// Preset name (default, planted, null) or a JSON spec file.
    #[arg(long, default_value = "default")]
    pub spec: String,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_queries: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct IngestArgs {
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long)]
    pub queries: PathBuf,
    /// Embedding store to check for coverage and copy alongside.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "forward")]
    pub traversal: TraversalArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationArg {
    Full,
    SplitVector,
    SingleVector,
    NoPsr,
    NoGating,
}

impl From<AblationArg> for Ablation {
    fn from(a: AblationArg) -> Self {
        match a {
            AblationArg::Full => Ablation::Full,
            AblationArg::SplitVector => Ablation::SplitVector,
            AblationArg::SingleVector => Ablation::SingleVector,
            AblationArg::NoPsr => Ablation::NoPsr,
            AblationArg::NoGating => Ablation::NoGating,
        }
    }
}

/// Model and optimisation settings shared by the training commands.
#[derive(Debug, Clone, Args, Serialize)]
pub struct ModelArgs {
    /// PSR strength β.
    #[arg(long)]
    pub beta: Option<f64>,
    /// Hidden widths of the scoring MLP, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    /// BFS radius of the candidate set.
    #[arg(long)]
    pub max_step: Option<usize>,
    /// Training configuration file with `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training key overrides, `key=value`; applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, value_enum, default_value = "forward")]
    pub traversal: TraversalArg,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "full")]
    pub ablation: AblationArg,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct RetrieveArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub k: usize,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Also write the per-layer PSR trace of every query.
    #[arg(long)]
    pub psr_trace: bool,
    #[arg(long, value_enum, default_value = "forward")]
    pub traversal: TraversalArg,
    #[arg(long)]
    pub out: PathBuf,
}

/// Reader endpoint settings; QA runs only when `--endpoint` is given.
#[derive(Debug, Clone, Args, Serialize)]
pub struct QaArgs {
    /// Base URL of an OpenAI-compatible endpoint, e.g. http://127.0.0.1:8089/v1
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long, default_value = "reader")]
    pub llm_model: String,
    /// Environment variable holding the bearer token.
    #[arg(long)]
    pub token_env: Option<String>,
    /// Triples handed to the reader.
    #[arg(long, default_value_t = parallax_gateway::DEFAULT_TOP_K)]
    pub qa_k: usize,
    /// Prompt template file; the bundled one is used otherwise.
    #[arg(long)]
    pub template: Option<PathBuf>,
    /// Prompt budget in characters.
    #[arg(long)]
    pub budget: Option<usize>,
    #[arg(long)]
    pub qps: Option<f64>,
    #[arg(long, default_value_t = 4)]
    pub concurrency: usize,
    #[arg(long, default_value_t = 60_000)]
    pub timeout_ms: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub k: usize,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[arg(long, value_enum, default_value = "forward")]
    pub traversal: TraversalArg,
    #[command(flatten)]
    pub qa: QaArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct AnalyzeArgs {
    /// Run log written by `eval`.
    #[arg(long)]
    pub run_log: PathBuf,
    /// Heads listed individually in the heatmap; the rest form `Others`.
    #[arg(long, default_value_t = 5)]
    pub top: usize,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct DddArgs {
    /// Run log of the evaluation queries.
    #[arg(long)]
    pub run_log: PathBuf,
    /// Specialist heads, comma separated.
    #[arg(long, value_delimiter = ',', conflicts_with = "select_from")]
    pub specialists: Option<Vec<usize>>,
    /// Run log (usually dev) used to pick specialists by contribution on long queries.
    #[arg(long)]
    pub select_from: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    pub n_specialists: usize,
    #[arg(long, default_value_t = 50)]
    pub draws: usize,
    #[arg(long, default_value_t = 2000)]
    pub boot: usize,
    #[arg(long, default_value = "answer_recall")]
    pub metric: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 20)]
    pub k: usize,
    #[command(flatten)]
    pub qa: QaArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct BetaSweepArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,0.2,0.5,2.0")]
    pub values: Vec<f64>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 20)]
    pub k: usize,
    #[command(flatten)]
    pub qa: QaArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum MockModeArg {
    EchoGold,
    Garbage,
    NoMarker,
}

#[derive(Debug, Args, Serialize)]
pub struct ServeMockArgs {
    #[arg(long, default_value_t = 8089)]
    pub port: u16,
    #[arg(long, value_enum, default_value = "echo-gold")]
    pub mode: MockModeArg,
    /// Dataset whose queries supply the gold answers for echo-gold.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Number of initial requests answered with `--fail-status`.
    #[arg(long, default_value_t = 0)]
    pub fail_first: usize,
    #[arg(long, default_value_t = 503)]
    pub fail_status: u16,
}

/// Error carrying an explicit exit status.
#[derive(Debug, thiserror::Error)]
#[error("{message}")]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

pub fn config_error(message: impl Into<String>) -> anyhow::Error {
    CliError { code: EXIT_CONFIG, message: message.into() }.into()
}

/// Exit status for an error chain.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CliError>() {
            return e.code;
        }
        if let Some(e) = cause.downcast_ref::<parallax_core::Error>() {
            use parallax_core::Error as E;
            return match e {
                E::Config(_) => EXIT_CONFIG,
                E::Io { .. } | E::Parse { .. } | E::Format(_) | E::Invalid(_) => EXIT_DATA,
                E::Diverged { .. } => EXIT_RUNTIME,
            };
        }
        if let Some(e) = cause.downcast_ref::<parallax_gateway::GatewayError>() {
            use parallax_gateway::GatewayError as G;
            return match e {
                G::Config(_) | G::Template(_) => EXIT_CONFIG,
                G::Io { .. } => EXIT_DATA,
                _ => EXIT_RUNTIME,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_DATA;
        }
    }
    EXIT_RUNTIME
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenSynth(a) => commands::gen_synth(&a),
        Command::Ingest(a) => commands::ingest(&a),
        Command::Train(a) => commands::train(&a),
        Command::Retrieve(a) => commands::retrieve(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::AnalyzeHeads(a) => commands::analyze_heads(&a),
        Command::Ddd(a) => commands::ddd(&a),
        Command::Ablate(a) => commands::ablate(&a),
        Command::BetaSweep(a) => commands::beta_sweep(&a),
        Command::ServeMock(a) => commands::serve_mock(&a),
    }
}
