//! `dreamfield`: text-to-3D optimization, reconstruction, rendering and
//! retrieval evaluation from the command line.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dreamfield::Error;

use settings::RunArgs;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "dreamfield", version, about = "Text-guided neural radiance fields")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Optimize a field for a caption with a text-image scorer.
    Generate(GenerateArgs),
    /// Fit a field to posed images with the photometric scorer.
    Reconstruct(ReconstructArgs),
    /// R-Precision of trained fields against a caption pool.
    Eval(EvalArgs),
    /// Turntable, depth and transmittance frames of a checkpoint. Offline.
    Render(RenderArgs),
    /// Write the synthetic two-sphere dataset.
    SynthDataset(SynthArgs),
}

#[derive(Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Turntable frames written to `<out>/frames` at the end.
    #[arg(long, default_value_t = 8)]
    pub frames: usize,
}

#[derive(Args)]
pub struct ReconstructArgs {
    /// Directory with `poses.txt`, the frames it lists and optionally `heldout.txt`.
    #[arg(long)]
    pub targets: PathBuf,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Checkpoints to score; each one's caption must be in the pool.
    #[arg(required = true)]
    pub checkpoints: Vec<PathBuf>,
    /// Caption pool, one caption per line.
    #[arg(long)]
    pub pool: PathBuf,
    /// Service URL [fallback: DREAMFIELD_ENDPOINT].
    #[arg(long)]
    pub endpoint: Option<String>,
    /// Write the JSON report here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 168)]
    pub resolution: usize,
    #[arg(long, default_value_t = dreamfield::eval::EVAL_SAMPLES)]
    pub samples: usize,
    /// Azimuth of the held-out view, degrees.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub azimuth: f64,
    #[arg(long, default_value_t = dreamfield::eval::EVAL_ELEVATION_DEG, allow_negative_numbers = true)]
    pub elevation: f64,
    #[arg(long, default_value_t = 4.0)]
    pub radius: f64,
    #[arg(long, default_value_t = 1.2)]
    pub focal_scale: f64,
    /// Items per embedding request.
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    /// Concurrent embedding requests.
    #[arg(long, default_value_t = 4)]
    pub in_flight: usize,
}

#[derive(Args)]
pub struct RenderArgs {
    pub checkpoint: PathBuf,
    /// Output directory [default: `frames/` next to the checkpoint].
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub frames: usize,
    #[arg(long, default_value_t = 168)]
    pub resolution: usize,
    #[arg(long, default_value_t = dreamfield::eval::EVAL_SAMPLES)]
    pub samples: usize,
    #[arg(long, default_value_t = dreamfield::eval::EVAL_ELEVATION_DEG, allow_negative_numbers = true)]
    pub elevation: f64,
    #[arg(long, default_value_t = 4.0)]
    pub radius: f64,
    #[arg(long, default_value_t = 1.2)]
    pub focal_scale: f64,
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub resolution: usize,
    #[arg(long, default_value_t = 8)]
    pub views: usize,
    /// Samples per ray for the analytic renders.
    #[arg(long, default_value_t = 1024)]
    pub samples: usize,
}

/// 2 for bad input, 3 when the scoring service cannot be reached.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Transport(_) => 3,
        Error::Config(_) | Error::Argument(_) | Error::Shape(_) | Error::Checkpoint(_) | Error::Image(_) => 2,
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Generate(a) => commands::generate(a),
        Command::Reconstruct(a) => commands::reconstruct(a),
        Command::Eval(a) => commands::eval(a),
        Command::Render(a) => commands::render(a),
        Command::SynthDataset(a) => commands::synth_dataset(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
