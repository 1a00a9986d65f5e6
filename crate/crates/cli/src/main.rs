mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "imageset", version, about = "Divide-and-conquer image-set generation on a toy DiT")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the toy model on the shape corpus and write a checkpoint.
    Train(TrainArgs),
    /// Recaption an instruction and generate an image set.
    Generate(GenerateArgs),
    /// Print the set attention mask for a token layout.
    MaskDump(MaskDumpArgs),
    /// Score an image set and print a report.
    Eval(EvalArgs),
    /// Compare divide:total step ratios on the color-histogram proxy.
    SweepRatio(SweepArgs),
    /// Print corpus statistics as JSON.
    Stats(StatsArgs),
}

#[derive(Args, Serialize)]
pub struct TrainArgs {
    /// JSON settings file; flags override its entries.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Checkpoint output path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Serialize)]
pub struct GenerateArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Free-text instruction.
    #[arg(long, conflicts_with = "task_id")]
    pub instruction: Option<String>,
    /// Task id looked up in `--corpus`.
    #[arg(long)]
    pub task_id: Option<String>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Set size, when the instruction does not state one.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub divide: Option<usize>,
    #[arg(long)]
    pub guidance: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// auto, 1xn or 2x2.
    #[arg(long)]
    pub grid: Option<String>,
    /// fallback (rule based) or client (chat endpoint from the environment).
    #[arg(long)]
    pub recaption: Option<String>,
    #[arg(long)]
    pub llm_model: Option<String>,
    /// Never touch the network.
    #[arg(long)]
    pub offline: bool,
    /// Also write binary PPM copies of every image.
    #[arg(long)]
    pub ppm: bool,
    /// Integer upscale factor for written images.
    #[arg(long)]
    pub scale: Option<u32>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct MaskDumpArgs {
    #[arg(long)]
    pub n: usize,
    /// Prompt length per image, comma separated; one value is repeated.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    pub prompt_lens: Vec<usize>,
    #[arg(long, default_value_t = 1)]
    pub global_len: usize,
    /// Visual token count per image, comma separated; one value is repeated.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    pub visual_lens: Vec<usize>,
    #[arg(long)]
    pub block_global: bool,
    #[arg(long)]
    pub block_cross_image: bool,
    /// Offline is the only mode; accepted for uniformity.
    #[arg(long)]
    pub offline: bool,
}

#[derive(Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Directory of images, read in file-name order.
    #[arg(long)]
    pub images: Option<PathBuf>,
    #[arg(long)]
    pub instruction: Option<String>,
    /// Manifest from `generate`; supplies instruction and per-image prompts.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Chat endpoint URL; defaults to the environment.
    #[arg(long, conflicts_with = "fixtures")]
    pub endpoint: Option<String>,
    /// Directory of fixture transcripts used instead of an endpoint.
    #[arg(long)]
    pub fixtures: Option<PathBuf>,
    /// Canned aesthetic scores, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub aesthetics_scores: Option<Vec<f64>>,
    #[arg(long)]
    pub aesthetics_endpoint: Option<String>,
    #[arg(long)]
    pub llm_model: Option<String>,
    #[arg(long)]
    pub vlm_model: Option<String>,
    /// per_image_prompt or instruction.
    #[arg(long)]
    pub alignment_source: Option<String>,
    #[arg(long)]
    pub max_in_flight: Option<usize>,
    #[arg(long)]
    pub offline: bool,
    /// Report JSON path; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
pub struct SweepArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Ratios such as 1:20,2:20,4:20,6:20.
    #[arg(long, value_delimiter = ',')]
    pub ratios: Option<Vec<String>>,
    /// Number of seeds.
    #[arg(long)]
    pub seeds: Option<usize>,
    #[arg(long)]
    pub seed_base: Option<u64>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub guidance: Option<f64>,
    #[arg(long)]
    pub offline: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub offline: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(&a),
        Command::Generate(a) => commands::generate(&a),
        Command::MaskDump(a) => commands::mask_dump(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::SweepRatio(a) => commands::sweep(&a),
        Command::Stats(a) => commands::stats(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit as u8)
        }
    }
}
