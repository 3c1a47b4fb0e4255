//! `treecast` command-line front end.

mod commands;
mod render;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use treecast::{Error, ErrorKind};

pub const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "+", env!("TREECAST_GIT_DESCRIBE"));

/// Tree-structured multi-horizon diffusion forecasting of fire risk maps.
///
/// Any config field can be overridden with a dotted flag, e.g.
/// `--train.lr_max 1e-3` or `--data.resolution [16,16]`
/// (precedence: command line > config file > defaults).
#[derive(Debug, Parser)]
#[command(name = "treecast", version = VERSION)]
pub struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Root seed (overrides `seed` in the config).
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build FRM frames, manifest and split indices from a CSV or the synthetic generator.
    BuildData(BuildDataArgs),
    /// Print the tree plan and its denoiser-call counts.
    PlanTree(PlanTreeArgs),
    /// Train the denoiser with the dual-path shifting loss.
    Train(TrainArgs),
    /// Sample all horizons for one conditioning day.
    Sample(SampleArgs),
    /// Score samplers on a split (RMSE, MAE, KL).
    Evaluate(EvaluateArgs),
    /// Time samplers over several inference step counts.
    Bench(BenchArgs),
    /// Render FRM frames as PNG heatmaps.
    Render(RenderArgs),
}

#[derive(Debug, Args)]
pub struct BuildDataArgs {
    /// FIRMS-style CSV (sets `data.source = "csv"`).
    #[arg(long, conflicts_with = "synthetic")]
    pub csv: Option<PathBuf>,
    /// Use the moving-bump generator (sets `data.source = "synthetic"`).
    #[arg(long)]
    pub synthetic: bool,
    /// Output directory (default: `paths.dataset_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlanTreeArgs {
    /// Tree depth L.
    #[arg(long = "L")]
    pub depth: Option<usize>,
    /// Explicit branching vector, e.g. `9,3`.
    #[arg(long, value_delimiter = ',', conflicts_with = "depth")]
    pub branching: Option<Vec<usize>>,
    /// Number of horizons (T + 1).
    #[arg(long)]
    pub horizons: Option<usize>,
    /// Reverse diffusion steps D.
    #[arg(long = "D")]
    pub steps: Option<usize>,
    /// Print only the JSON report.
    #[arg(long)]
    pub json: bool,
    /// Also write the JSON report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory (default: `paths.dataset_dir`).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Checkpoint directory (default: `paths.checkpoint_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Continue from this checkpoint directory.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SamplingArgs {
    /// Checkpoint directory.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory (default: `paths.dataset_dir`).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Inference steps (default: the checkpoint's).
    #[arg(long = "d-test")]
    pub d_test: Option<usize>,
    /// Tree depth (default: the checkpoint's).
    #[arg(long = "L")]
    pub depth: Option<usize>,
    /// Stochastic (η = 1) instead of deterministic transitions.
    #[arg(long)]
    pub stochastic: bool,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[command(flatten)]
    pub common: SamplingArgs,
    /// Conditioning day (dataset day index).
    #[arg(long)]
    pub day: usize,
    /// tree, independent, shared or autoregressive.
    #[arg(long, default_value = "tree")]
    pub sampler: String,
    /// Output directory (default: `<paths.output_dir>/sample-<sampler>-day<day>`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: SamplingArgs,
    /// train, val or test.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Samplers to score (comma separated).
    #[arg(long, value_delimiter = ',', default_value = "tree,independent")]
    pub samplers: Vec<String>,
    /// Evaluate at most this many (evenly spaced) segments; 0 = all.
    #[arg(long, default_value_t = 0)]
    pub max_segments: usize,
    /// Report file (default: `<paths.output_dir>/evaluate.json`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub common: SamplingArgs,
    /// Inference step counts.
    #[arg(long = "steps", value_delimiter = ',', default_value = "10,20,50,100")]
    pub steps: Vec<usize>,
    /// Timed runs per cell (after two warm-ups).
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    /// Samplers to time (comma separated).
    #[arg(long, value_delimiter = ',', default_value = "tree,independent,shared,autoregressive")]
    pub samplers: Vec<String>,
    /// Report file (default: `<paths.output_dir>/bench.json`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// A frame (`.f32`) or a directory of frames.
    #[arg(long)]
    pub input: PathBuf,
    /// Matching ground-truth frames, rendered side by side.
    #[arg(long)]
    pub target: Option<PathBuf>,
    /// Output directory for PNGs.
    #[arg(long)]
    pub out: PathBuf,
    /// Pixel magnification.
    #[arg(long, default_value_t = 4)]
    pub scale: u32,
}

/// Splits `--a.b value` / `--a.b=value` config overrides from the rest.
type Overrides = Vec<(String, String)>;

fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Overrides), String> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut iter = args.into_iter();
    while let Some(arg) = iter.next() {
        let key = arg.strip_prefix("--").filter(|k| {
            let name = k.split('=').next().unwrap_or("");
            name.contains('.') && !name.starts_with('.')
        });
        match key {
            Some(k) => match k.split_once('=') {
                Some((k, v)) => overrides.push((k.to_string(), v.to_string())),
                None => {
                    let v = iter
                        .next()
                        .ok_or_else(|| format!("override --{k} needs a value"))?;
                    overrides.push((k.to_string(), v));
                }
            },
            None => rest.push(arg),
        }
    }
    Ok((rest, overrides))
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Usage => 1,
        ErrorKind::Data => 2,
        ErrorKind::Runtime => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let (args, overrides) = match split_overrides(std::env::args().collect()) {
        Ok(v) => v,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(1);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match commands::run(cli, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.kind()))
        }
    }
}

pub type CliResult<T> = Result<T, Error>;
