//! The `cbdt` command line.

pub mod commands;
pub mod config;
pub mod files;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use config::{DecodeArgs, FileConfig, RunConfig, SimKind};

#[derive(Debug, Parser)]
#[command(name = "cbdt", version, about = "Memory-based and MBR reranking of hypothesis lists")]
pub struct Cli {
    /// TOML file of `key = value` defaults; flags and CBDT_* variables win.
    #[arg(long, global = true, env = "CBDT_CONFIG")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Score example hypotheses against their references and save the memory.
    BuildMemory(BuildMemoryArgs),
    /// Pick one hypothesis per input.
    Decode(DecodeCmd),
    /// Corpus metrics of decoded outputs against references.
    Eval(EvalArgs),
    /// Time decoding per test case over repeated runs.
    Bench(BenchArgs),
    /// Decode and evaluate once per value of one hyperparameter.
    Sweep(SweepArgs),
    /// Convert `{"id", "vector"}` lines into the binary embedding cache.
    CacheEmbeddings(CacheArgs),
}

#[derive(Debug, Args)]
pub struct BuildMemoryArgs {
    /// `{"id", "source", "ref"}` lines.
    #[arg(long)]
    pub parallel: PathBuf,
    /// `{"id", "hyps"}` lines.
    #[arg(long)]
    pub hyps: PathBuf,
    #[arg(long, env = "CBDT_UTILITY")]
    pub utility: Option<String>,
    /// Hypotheses kept per example before deduplication (default 256).
    #[arg(long, env = "CBDT_H_CAP")]
    pub h_cap: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, env = "CBDT_THREADS")]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DecodeCmd {
    /// `{"id", "source"}` lines; output follows this order.
    #[arg(long)]
    pub inputs: PathBuf,
    /// `{"id", "hyps": [{"text", "logprob"}]}` lines.
    #[arg(long)]
    pub candidates: PathBuf,
    #[command(flatten)]
    pub decode: DecodeArgs,
    #[arg(long, short)]
    pub output: Option<PathBuf>,
    /// Report failing inputs on stderr and keep going.
    #[arg(long)]
    pub continue_on_error: bool,
    /// Add per-stage nanosecond timings to every output line.
    #[arg(long)]
    pub timing: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Output of `decode`.
    #[arg(long)]
    pub outputs: PathBuf,
    #[arg(long)]
    pub references: PathBuf,
    /// Comma-separated: chrf, bleu, table:<path>.
    #[arg(long, default_value = "chrf,bleu")]
    pub metrics: String,
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub inputs: PathBuf,
    #[arg(long)]
    pub candidates: PathBuf,
    #[command(flatten)]
    pub decode: DecodeArgs,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    /// Comma-separated rules to time; defaults to --rule.
    #[arg(long)]
    pub rules: Option<String>,
    /// Sleep this long inside every utility call.
    #[arg(long)]
    pub mock_delay_ms: Option<f64>,
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepParam {
    K,
    #[value(name = "h_cap", alias = "H_cap")]
    HCap,
    Lambda,
    #[value(name = "tau_x", alias = "tau_X")]
    TauX,
    #[value(name = "tau_y", alias = "tau_Y")]
    TauY,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::K => "k",
            SweepParam::HCap => "h_cap",
            SweepParam::Lambda => "lambda",
            SweepParam::TauX => "tau_x",
            SweepParam::TauY => "tau_y",
        }
    }
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub inputs: PathBuf,
    #[arg(long)]
    pub candidates: PathBuf,
    #[command(flatten)]
    pub decode: DecodeArgs,
    #[arg(long)]
    pub param: SweepParam,
    /// Comma-separated values.
    #[arg(long)]
    pub values: String,
    /// Parallel data for rebuilding the memory in an H_cap sweep.
    #[arg(long)]
    pub parallel: Option<PathBuf>,
    #[arg(long)]
    pub hyps: Option<PathBuf>,
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CacheArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: &Cli) -> anyhow::Result<()> {
    let file = FileConfig::load(cli.config.as_deref())?;
    match &cli.command {
        Command::BuildMemory(a) => commands::build_memory_cmd(a, &file),
        Command::Decode(a) => commands::decode_cmd(a, &file),
        Command::Eval(a) => commands::eval_cmd(a),
        Command::Bench(a) => commands::bench_cmd(a, &file),
        Command::Sweep(a) => commands::sweep_cmd(a, &file),
        Command::CacheEmbeddings(a) => commands::cache_embeddings_cmd(a),
    }
}
