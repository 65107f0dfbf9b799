//! `tokenprint`: detect under-trained tokens, embed a fingerprint built from
//! them, and verify or evaluate it. Each stage reads and writes artifacts in
//! `--out-dir`, so stages can be re-run individually.

mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

#[derive(Debug, Parser, Serialize)]
#[command(name = "tokenprint", version, about)]
pub struct Cli {
    /// Master seed for every random choice of the command.
    #[arg(long, global = true, default_value_t = 1)]
    pub seed: u64,
    /// Print machine-readable JSON on stdout.
    #[arg(long, global = true)]
    pub json: bool,
    /// Directory for artifacts; default input paths are resolved against it.
    #[arg(long, global = true, default_value = "tokenprint-out")]
    pub out_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
pub enum Command {
    /// Generate the toy corpora and pretrain a base model.
    Pretrain(PretrainArgs),
    /// Flag under-trained tokens in an unembedding matrix.
    Detect(DetectArgs),
    /// Draw a trigger/target pair from a detection report.
    Fingerprint(FingerprintArgs),
    /// Fine-tune a checkpoint so that it maps the trigger to the target.
    Embed(EmbedArgs),
    /// Check a local checkpoint or a remote endpoint for the fingerprint.
    Verify(VerifyArgs),
    /// Measure the five fingerprint metrics.
    Evaluate(EvaluateArgs),
    /// Run every stage end to end.
    Demo(DemoArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct PretrainArgs {
    #[arg(long, default_value_t = 2000)]
    pub sequences: usize,
    #[arg(long, default_value_t = 200)]
    pub heldout: usize,
    #[arg(long, default_value_t = 3)]
    pub epochs: usize,
    #[arg(long, default_value_t = 3e-3)]
    pub lr: f64,
    /// Sequences in each downstream corpus used for persistence.
    #[arg(long, default_value_t = 1000)]
    pub downstream_sequences: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct DetectArgs {
    /// UFPM unembedding matrix [default: <out-dir>/unembedding.ufpm]
    #[arg(long)]
    pub matrix: Option<PathBuf>,
    /// Comma-separated token ids known to be unused.
    #[arg(long, value_delimiter = ',', required = true)]
    pub unused: Vec<u32>,
    #[arg(long, default_value_t = 0.02)]
    pub percentile: f64,
    /// Use the smallest percentile in 0.02..=0.15 that flags at least
    /// --min-flagged tokens instead of --percentile.
    #[arg(long)]
    pub auto_percentile: bool,
    #[arg(long, default_value_t = 20)]
    pub min_flagged: usize,
    /// Report path [default: <out-dir>/report.json]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct FingerprintArgs {
    /// Detection report [default: <out-dir>/report.json]
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, default_value_t = 11)]
    pub n_min: usize,
    #[arg(long, default_value_t = 15)]
    pub n_max: usize,
    #[arg(long, default_value_t = 5)]
    pub m: usize,
    /// Pair path [default: <out-dir>/pair.json]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct EmbedArgs {
    /// Base checkpoint [default: <out-dir>/base.ckpt]
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Fingerprint pair [default: <out-dir>/pair.json]
    #[arg(long)]
    pub pair: Option<PathBuf>,
    /// Report the pair must have been drawn from.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 2e-5)]
    pub lr: f64,
    #[arg(long, default_value_t = 10)]
    pub copies: usize,
    #[arg(long, default_value_t = 10.0)]
    pub lr_multiplier: f64,
    #[arg(long, default_value_t = 4)]
    pub max_escalations: usize,
    #[arg(long, default_value_t = 0.05)]
    pub loss_target: f64,
    /// Output checkpoint [default: <out-dir>/fingerprinted.ckpt]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct VerifyArgs {
    /// Fingerprint pair [default: <out-dir>/pair.json]
    #[arg(long)]
    pub pair: Option<PathBuf>,
    /// Local checkpoint [default: <out-dir>/fingerprinted.ckpt]
    #[arg(long, conflicts_with = "endpoint")]
    pub checkpoint: Option<PathBuf>,
    /// Base URL of a completions endpoint, e.g. http://127.0.0.1:8000
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long, default_value = "/v1/completions")]
    pub path: String,
    /// Request timeout in seconds.
    #[arg(long, default_value_t = 30.0)]
    pub timeout: f64,
    /// Sample instead of greedy decoding; --seed seeds the sampler.
    #[arg(long)]
    pub sampled: bool,
    #[arg(long, default_value_t = 50)]
    pub top_k: usize,
    #[arg(long, default_value_t = 0.95)]
    pub top_p: f64,
    #[arg(long, default_value_t = 0.7)]
    pub temperature: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct EvaluateArgs {
    /// Checkpoint before fingerprinting [default: <out-dir>/base.ckpt]
    #[arg(long)]
    pub base: Option<PathBuf>,
    /// Fingerprinted checkpoint [default: <out-dir>/fingerprinted.ckpt]
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Fingerprint pair [default: <out-dir>/pair.json]
    #[arg(long)]
    pub pair: Option<PathBuf>,
    /// Held-out corpus [default: <out-dir>/heldout.txt]
    #[arg(long)]
    pub heldout: Option<PathBuf>,
    /// Persistence schedule NAME:PATH:EPOCHS:LR, repeatable
    /// [default: the schedules written by `pretrain`]
    #[arg(long = "schedule")]
    pub schedules: Vec<String>,
    /// SFT statistics providing the efficiency time
    /// [default: <out-dir>/sft_stats.json]
    #[arg(long)]
    pub sft_stats: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    pub trials: usize,
    /// Sampled-effectiveness checks use seeds 0..N.
    #[arg(long, default_value_t = 20)]
    pub sampling_seeds: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct DemoArgs {
    #[arg(long, default_value_t = 2000)]
    pub sequences: usize,
    #[arg(long, default_value_t = 3)]
    pub pretrain_epochs: usize,
    #[arg(long, default_value_t = 1000)]
    pub downstream_sequences: usize,
    #[arg(long, default_value_t = 500)]
    pub trials: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    log::info!(
        "resolved config: {}",
        serde_json::to_string(&cli).unwrap_or_default()
    );
    match commands::run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("tokenprint: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
