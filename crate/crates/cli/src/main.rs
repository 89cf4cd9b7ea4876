//! `deepunet`: synthesise data, train, predict, evaluate and run diagnostics.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

mod diag;
mod infer;
mod settings;
mod synth;
mod train;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use settings::{usage, CliError, CliResult, FileConfig};

/// Environment variable holding the worker-thread count.
pub const THREADS_ENV: &str = "DEEPUNET_THREADS";

#[derive(Parser, Debug)]
#[command(
    name = "deepunet",
    version,
    about = "DeepUNet sea/land segmentation",
    arg_required_else_help = true
)]
struct Cli {
    /// `key=value` file of defaults; command-line flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write procedurally generated coastline images, masks and manifests.
    Synth(synth::SynthArgs),
    /// Train a model and write checkpoints plus a metrics log.
    Train(train::TrainArgs),
    /// Segment one image with overlapping tiles.
    Predict(infer::PredictArgs),
    /// Score a checkpoint on a manifest.
    Evaluate(infer::EvaluateArgs),
    /// Compare tape gradients of the whole network against finite differences.
    Gradcheck(diag::GradcheckArgs),
    /// Report the receptive field of a network configuration.
    Rf(diag::RfArgs),
}

/// Tiling flags shared by `predict` and `evaluate`.
#[derive(Args, Debug, Clone)]
pub struct TileArgs {
    /// Tile side; defaults to the training tile stored in the checkpoint.
    #[arg(long)]
    tile: Option<usize>,
    /// Distance between tile origins; defaults to half a tile.
    #[arg(long)]
    stride: Option<usize>,
    /// Width of the Gaussian blending weights; defaults to a sixth of a tile.
    #[arg(long)]
    sigma: Option<f64>,
    /// Tiles per forward pass.
    #[arg(long)]
    batch: Option<usize>,
    /// Require a checkpoint trained without Plus connections.
    #[arg(long)]
    no_plus: bool,
}

fn configure_threads() -> CliResult<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| usage(format!("{THREADS_ENV} must be a positive integer, got `{value}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Runtime(e.into()))
}

fn run(cli: Cli) -> CliResult<()> {
    configure_threads()?;
    let file = FileConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Synth(a) => synth::run(a, &file),
        Command::Train(a) => train::run(a, &file),
        Command::Predict(a) => infer::predict(a, &file),
        Command::Evaluate(a) => infer::evaluate(a, &file),
        Command::Gradcheck(a) => diag::gradcheck(a, &file),
        Command::Rf(a) => diag::rf(a, &file),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp_secs()
        .init();
    let code = match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("Run `deepunet --help` for usage.");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    };
    let _ = std::io::stdout().flush();
    code
}
