mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(
    name = "ssd-pulse",
    version,
    about = "Remote pulse estimation with dual-pathway SSD"
)]
struct Cli {
    /// JSON file whose keys mirror the flags; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed for generation and benchmarking.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for the parallel pool.
    #[arg(long, global = true, env = "SSD_PULSE_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic clips, labels and a manifest.
    Synth(SynthArgs),
    /// Run the network on one clip and write the waveform as CSV.
    Forward(ForwardArgs),
    /// Filter, estimate heart rates and report metrics.
    Eval(EvalArgs),
    /// Time the three SSD formulations.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub hr: Option<f64>,
    #[arg(long)]
    pub seconds: Option<f64>,
    #[arg(long)]
    pub fps: Option<f64>,
    /// Noise standard deviation in units of the pulse amplitude.
    #[arg(long)]
    pub noise: Option<f64>,
    /// Rigid jitter amplitude in pixels.
    #[arg(long)]
    pub motion: Option<f64>,
    #[arg(long)]
    pub harmonic: Option<f64>,
    #[arg(long)]
    pub count: Option<usize>,
    /// Frame height and width in pixels.
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ForwardArgs {
    /// Checkpoint directory.
    #[arg(long, conflicts_with = "init_seed")]
    pub ckpt: Option<PathBuf>,
    /// Use freshly initialized weights from this seed instead of a checkpoint.
    #[arg(long)]
    pub init_seed: Option<u64>,
    /// PTNSR clip of shape 3×T×H×W.
    #[arg(long)]
    pub clip: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub fps: Option<f64>,
    /// Also write the weights used as a checkpoint directory.
    #[arg(long)]
    pub save_ckpt: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Predicted waveforms (CSV or PTNSR), paired in order with --label.
    #[arg(long, num_args = 1..)]
    pub pred: Option<Vec<PathBuf>>,
    /// Reference waveforms (CSV or PTNSR).
    #[arg(long, num_args = 1..)]
    pub label: Option<Vec<PathBuf>>,
    #[arg(long)]
    pub fps: Option<f64>,
    /// Output directory for per_clip.csv, summary.json and bland_altman.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Sequence lengths, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub lengths: Option<Vec<usize>>,
    #[arg(long)]
    pub repeats: Option<usize>,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Report timings without enforcing the scaling limits.
    #[arg(long)]
    pub no_check: bool,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let file = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(n) = cli.threads.or(file.threads) {
        if n == 0 {
            return Err(CliError::usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::usage(format!("cannot configure thread pool: {e}")))?;
    }
    let seed = cli.seed.or(file.seed).unwrap_or(0);
    match cli.command {
        Command::Synth(a) => commands::synth(&a, &file, seed),
        Command::Forward(a) => commands::forward(&a, &file),
        Command::Eval(a) => commands::eval(&a, &file),
        Command::Bench(a) => commands::bench(&a, &file, seed),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
