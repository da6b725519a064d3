mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "obsflow", version, about = "Smoothing and forecasting of chaotic systems with neural operators")]
struct Cli {
    /// Worker threads (defaults to OBSFLOW_THREADS, then to all cores).
    #[arg(long, global = true, env = "OBSFLOW_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SystemName {
    L63,
    L96,
    Ks,
}

#[derive(Args, Debug)]
pub struct SystemArgs {
    #[arg(long, value_enum)]
    pub system: SystemName,
    /// Lorenz '96 forcing.
    #[arg(long, default_value_t = 8.0)]
    pub forcing: f64,
    /// Lorenz '96 dimension.
    #[arg(long, default_value_t = 40)]
    pub dim: usize,
    /// KS domain length (default 32π).
    #[arg(long)]
    pub length: Option<f64>,
    /// KS grid points.
    #[arg(long, default_value_t = 128)]
    pub grid: usize,
    /// Observed coordinates, zero-based (default: x for L63, the standard
    /// 30-of-40 split for L96, every grid point for KS).
    #[arg(long, value_delimiter = ',')]
    pub observed: Option<Vec<usize>>,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate a system and write the trajectory as CSV.
    Simulate {
        #[command(flatten)]
        system: SystemArgs,
        /// Initial state, comma separated.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, conflicts_with = "seed")]
        x0: Option<Vec<f64>>,
        /// Draw the initial state from the system's initial distribution.
        #[arg(long)]
        seed: Option<u64>,
        /// Transient integrated and discarded before recording (with --seed).
        #[arg(long, default_value_t = 0.0)]
        burn_in: f64,
        #[arg(long)]
        t1: f64,
        #[arg(long, default_value_t = 0.02)]
        dt: f64,
        /// Output CSV (stdout if omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Test the observability-rank condition at a point; prints JSON.
    Observability {
        #[command(flatten)]
        system: SystemArgs,
        /// Full state, comma separated, in the system's own coordinate order.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        point: Vec<f64>,
        /// Order of the Lie derivative stack.
        #[arg(long, default_value_t = 2)]
        n: usize,
        #[arg(long, default_value_t = obsflow::observability::DEFAULT_RANK_TOLERANCE)]
        tolerance: f64,
    },
    /// Generate a dataset file.
    GenData {
        #[command(flatten)]
        source: TaskSource,
        #[arg(long)]
        count: usize,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
        /// Dataset seed (defaults to the config's seed, or 0).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a dataset.
    Train {
        /// Run configuration (TOML, or JSON by extension).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Loss history CSV (defaults to the checkpoint path with `.history.csv`).
        #[arg(long)]
        history: Option<PathBuf>,
        /// Overrides the configured epoch count.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score a checkpoint on a test dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Evaluate even if the checkpoint was trained on a different task.
        #[arg(long)]
        force: bool,
    },
    /// Compose a forecaster with itself and compare value distributions.
    Rollout {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Number of compositions.
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 100)]
        bins: usize,
        /// Number of test histories to roll out (default: all).
        #[arg(long)]
        samples: Option<usize>,
        /// How many individual trajectories to export as CSV.
        #[arg(long, default_value_t = 3)]
        trajectories: usize,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        force: bool,
    },
}

#[derive(Args, Debug)]
#[group(required = true, multiple = false)]
pub struct TaskSource {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// One of the built-in task presets.
    #[arg(long)]
    pub preset: Option<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

fn run(cli: Cli) -> obsflow::Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(obsflow::Error::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| obsflow::Error::Usage(e.to_string()))?;
    }
    match cli.command {
        Command::Simulate { system, x0, seed, burn_in, t1, dt, out } => {
            commands::simulate(&system, x0, seed, burn_in, t1, dt, out.as_deref())
        }
        Command::Observability { system, point, n, tolerance } => commands::observability(&system, &point, n, tolerance),
        Command::GenData { source, count, split, seed, out } => commands::gen_data(&source, count, split, seed, &out),
        Command::Train { config, data, out, resume, history, epochs } => {
            commands::train(config.as_deref(), &data, &out, resume.as_deref(), history.as_deref(), epochs)
        }
        Command::Eval { checkpoint, data, out_dir, force } => commands::eval(&checkpoint, &data, &out_dir, force),
        Command::Rollout { checkpoint, data, n, bins, samples, trajectories, out_dir, force } => {
            commands::rollout(&checkpoint, &data, n, bins, samples, trajectories, &out_dir, force)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
