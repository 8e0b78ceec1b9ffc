//! `evax`: pre-training, fine-tuning, evaluation and visualization runs.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use evax_core::{Category, Error};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "evax", version, about = "Masked image modeling for grayscale radiographs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Masked image modeling against a frozen tokenizer.
    Pretrain(TrainArgs),
    /// Fine-tune a classifier on a label manifest.
    FinetuneCls(TrainArgs),
    /// Fine-tune a segmenter on a mask manifest.
    FinetuneSeg(TrainArgs),
    /// Score a classifier checkpoint on one split.
    EvalCls(EvalClsArgs),
    /// Score a segmenter checkpoint on one split.
    EvalSeg(EvalSegArgs),
    /// Grad-CAM overlays, plus box localization for loc manifests.
    Cam(CamArgs),
    /// Self-attention maps of chosen query points.
    Attn(AttnArgs),
    /// Write a synthetic corpus.
    Synth(SynthArgs),
    /// Corpus pixel statistics and split counts.
    Stats(StatsArgs),
    /// Write a seeded random tokenizer checkpoint.
    InitTokenizer(InitTokenizerArgs),
}

/// Flags shared by the training commands. Each one overrides the key of
/// the same name in `--config`.
#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    /// `key = value` lines or a JSON object; a `config.resolved` of an
    /// earlier run is accepted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// ti, s, b or micro.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub data_fraction: Option<f64>,
    #[arg(long)]
    pub mask_ratio: Option<f64>,
    #[arg(long)]
    pub crop_scale_min: Option<f64>,
    #[arg(long)]
    pub tokenizer_ckpt: Option<PathBuf>,
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Accepted for compatibility; compute is single-threaded.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    /// Any other config key, as KEY=VALUE. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Args, Debug, Serialize)]
pub struct EvalClsArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// one, zero or exclude.
    #[arg(long, default_value = "one")]
    pub uncertain: String,
    /// Side of the decoded-image cache; the training value when absent.
    #[arg(long)]
    pub cache_size: Option<usize>,
    /// Optional run directory for `reports/metrics.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Args, Debug, Serialize)]
pub struct EvalSegArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Optional run directory; predicted masks go to `figures/`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Args, Debug, Serialize)]
pub struct CamArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Number of evenly spaced thresholds in [0.1, 0.6].
    #[arg(long, default_value_t = evax_core::metrics::DEFAULT_THRESHOLDS)]
    pub thresholds: usize,
    /// Overlay opacity.
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f32,
    /// Block whose output the maps are taken at; the last block when absent.
    #[arg(long)]
    pub block: Option<usize>,
    /// Class to explain for label manifests; all classes when absent.
    #[arg(long)]
    pub class: Option<String>,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Args, Debug, Serialize)]
pub struct AttnArgs {
    /// Any checkpoint holding a backbone.
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// Query pixel as `y,x` in the original image. Repeatable.
    #[arg(long = "point", value_name = "Y,X", required = true)]
    pub points: Vec<String>,
    /// Block index; the last block when absent.
    #[arg(long)]
    pub block: Option<usize>,
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f32,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Args, Debug, Serialize)]
pub struct SynthArgs {
    /// cls, seg or loc.
    #[arg(long)]
    pub task: String,
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub image_size: usize,
    #[arg(long)]
    pub radius_min: Option<f32>,
    #[arg(long)]
    pub radius_max: Option<f32>,
    #[arg(long)]
    pub noise: Option<f32>,
    #[arg(long)]
    pub contrast: Option<f32>,
    #[arg(long)]
    pub train_fraction: Option<f32>,
    #[arg(long)]
    pub val_fraction: Option<f32>,
    /// Fraction of lesion-free images (cls and seg only).
    #[arg(long, default_value_t = 0.0)]
    pub empty_fraction: f32,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct StatsArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Optional run directory for `reports/stats.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct InitTokenizerArgs {
    #[arg(long, default_value = "micro")]
    pub preset: String,
    #[arg(long, default_value_t = 224)]
    pub image_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

fn exit_code(e: &Error) -> (u8, &'static str) {
    match e.category() {
        Category::Config => (3, "config"),
        Category::Data => (4, "data"),
        Category::Numerical => (5, "numerical"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            if code != 0 {
                let msg = e.kind().as_str().unwrap_or("invalid arguments");
                eprintln!("evax: usage error: {msg}");
            }
            return ExitCode::from(code as u8);
        }
    };
    let result = match cli.command {
        Command::Pretrain(a) => commands::pretrain(&a),
        Command::FinetuneCls(a) => commands::finetune_cls(&a),
        Command::FinetuneSeg(a) => commands::finetune_seg(&a),
        Command::EvalCls(a) => commands::eval_cls(&a),
        Command::EvalSeg(a) => commands::eval_seg(&a),
        Command::Cam(a) => commands::cam(&a),
        Command::Attn(a) => commands::attn(&a),
        Command::Synth(a) => commands::synth(&a),
        Command::Stats(a) => commands::stats(&a),
        Command::InitTokenizer(a) => commands::init_tokenizer(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, category) = exit_code(&e);
            let msg = e.to_string().replace('\n', " ");
            eprintln!("evax: {category} error: {msg}");
            ExitCode::from(code)
        }
    }
}
