//! `didigan`: phantom data, training, paired generation and evaluation.
//!
//! Exit codes: 0 success (possibly with warnings), 1 runtime fault, 2 usage.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Runtime(e.into())
    }
}

#[derive(Parser, Debug)]
#[command(name = "didigan", version, about = "Paired AD/CN synthesis on a learned disease manifold")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a procedural phantom dataset with ground-truth masks.
    SynthData(SynthDataArgs),
    /// Turn labelled NIfTI volumes or PNG stacks into a training dataset.
    Ingest(IngestArgs),
    /// Train the generator and critic on a dataset.
    Train(TrainArgs),
    /// Fine-tune the critic's classification head on labelled phantom slices.
    FineTune(FineTuneArgs),
    /// Generate AD/CN pairs that share a constraint.
    Generate(GenerateArgs),
    /// Registration morphometry, tissue trends, style manifold and classifier reports.
    Evaluate(EvaluateArgs),
}

#[derive(Args, Debug)]
pub struct SynthDataArgs {
    /// Number of anatomies; each yields one CN and one AD slice.
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long, default_value_t = 64)]
    pub resolution: usize,
    /// Train, validation and test shares, comma separated.
    #[arg(long, default_value = "0.6,0.2,0.2")]
    pub ratios: String,
    #[arg(long, env = "DIDIGAN_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 4)]
    pub constraint_factor: usize,
    #[arg(long, default_value_t = 0.29)]
    pub ventricle_expand: f64,
    #[arg(long, default_value_t = 0.153)]
    pub hippocampus_shrink: f64,
    #[arg(long, default_value_t = 0.15)]
    pub cortex_thin: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct IngestArgs {
    /// Directory holding `manifest.json` (entries: file, class, subject).
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 256)]
    pub pad_to: usize,
    #[arg(long, default_value_t = 40)]
    pub center_n: usize,
    #[arg(long, default_value_t = 4)]
    pub constraint_factor: usize,
    #[arg(long, default_value = "0.6,0.2,0.2")]
    pub ratios: String,
    #[arg(long, env = "DIDIGAN_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory written by `synth-data` or `ingest`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// TOML file with (a subset of) the training config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted override, e.g. `--set weights.cycle=20`. Repeatable; applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Ablation: nearest-neighbour upsampling and unfiltered nonlinearities in the generator.
    #[arg(long)]
    pub no_antialias: bool,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long, env = "DIDIGAN_SEED")]
    pub seed: Option<u64>,
    /// Continue from a checkpoint directory; its stored config is used.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FineTuneArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dataset whose test split measures accuracy.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Labelled samples to tune on; 0 reports the pretrained head.
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    /// `frozen` trains only the layers above the trunk, `full` the whole class path.
    #[arg(long, default_value = "frozen")]
    pub mode: String,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    /// Anatomies rendered for the labelled pool (two slices each).
    #[arg(long, default_value_t = 500)]
    pub pool_anatomies: usize,
    #[arg(long, env = "DIDIGAN_SEED", default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// A dataset directory (its test split is used) or a directory of constraint `.bin`/`.png` files.
    #[arg(long)]
    pub constraints: PathBuf,
    #[arg(long, default_value_t = 6)]
    pub n: usize,
    #[arg(long, env = "DIDIGAN_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Output directory of `generate`.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    /// ROI masks: `<dir>/<pair>/{ventricle,hippocampus}.png`, falling back to `<dir>/{ventricle,hippocampus}.png`.
    #[arg(long)]
    pub rois: Option<PathBuf>,
    /// Checkpoint for the style-manifold and classifier reports.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Style codes per class for the manifold projection.
    #[arg(long)]
    pub styles: Option<usize>,
    /// Dataset whose test split feeds the classifier report.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, env = "DIDIGAN_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::SynthData(a) => commands::synth_data(a),
        Command::Ingest(a) => commands::ingest(a),
        Command::Train(a) => commands::train(a),
        Command::FineTune(a) => commands::fine_tune(a),
        Command::Generate(a) => commands::generate(a),
        Command::Evaluate(a) => commands::evaluate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
