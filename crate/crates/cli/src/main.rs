//! `modelslice` command-line front end.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 data or IO
//! error, 4 numeric failure during training.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use modelslice::data::Task;
use modelslice::incremental::WidenMode;

/// Environment variable overriding the output directory of every verb.
pub const OUT_ENV: &str = "MODELSLICE_OUT";

#[derive(Parser, Debug)]
#[command(name = "modelslice", version, about = "Width-sliceable model experiments")]
struct Cli {
    /// Output directory; overrides $MODELSLICE_OUT and the verb's default.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TaskArg {
    Spirals,
    Tinyimages,
    Charlm,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Spirals => Task::Spirals,
            TaskArg::Tinyimages => Task::TinyImages,
            TaskArg::Charlm => Task::CharLm,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Exact,
    Approx,
}

impl From<ModeArg> for WidenMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Exact => WidenMode::Exact,
            ModeArg::Approx => WidenMode::Approx,
        }
    }
}

/// Which examples a trained model is scored on.
#[derive(Args, Debug, Clone)]
struct DataArgs {
    /// Dataset file written by `gen-data` (default: regenerate the training set).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Score on a freshly generated set with a different seed.
    #[arg(long, conflicts_with = "data")]
    heldout: bool,
}

/// A trained checkpoint and the experiment it came from.
#[derive(Args, Debug, Clone)]
struct RunArgs {
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Experiment config (default: config.toml inside the checkpoint).
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a deterministic synthetic dataset.
    GenData {
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Examples (or characters for charlm); default from the task preset.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Train a sliced model; writes a checkpoint and per-epoch metrics.
    Train {
        /// Experiment config (TOML).
        #[arg(long, conflicts_with = "task")]
        config: Option<PathBuf>,
        /// Use the task's preset config instead of a file.
        #[arg(long, value_enum)]
        task: Option<TaskArg>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Dataset file written by `gen-data` (default: generate in memory).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Just validate the config and print it.
        #[arg(long)]
        dry_run: bool,
    },
    /// Score every listed rate of a checkpoint.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        data: DataArgs,
        /// Rates to score (default: the training list).
        #[arg(long, value_delimiter = ',')]
        rates: Option<Vec<f64>>,
    },
    /// Metric versus cost for a list of rates.
    Sweep {
        /// Checkpoint to score; without it only costs are reported.
        #[arg(long, required_unless_present = "model")]
        checkpoint: Option<PathBuf>,
        #[arg(long, requires = "checkpoint")]
        config: Option<PathBuf>,
        /// Named architecture (vgg13, spirals, tinyimages, charlm) for a
        /// cost-only sweep.
        #[arg(long, conflicts_with = "checkpoint")]
        model: Option<String>,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_delimiter = ',')]
        rates: Option<Vec<f64>>,
    },
    /// Per-layer parameter and FLOP report at each rate.
    Cost {
        /// Named architecture: vgg13, spirals, tinyimages or charlm.
        #[arg(long, required_unless_present = "spec", conflicts_with = "spec")]
        model: Option<String>,
        /// Model spec as JSON, or an experiment config as TOML.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        rates: Option<Vec<f64>>,
    },
    /// Latency-bounded serving simulation on a query trace.
    Simulate {
        /// One arrival time (seconds) per line (default: the bundled 16x burst).
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Latency constraint in seconds.
        #[arg(long, default_value_t = 2.0)]
        latency: f64,
        /// Full-model processing time per query in seconds.
        #[arg(long, default_value_t = 0.01)]
        unit_time: f64,
        #[arg(long, value_delimiter = ',')]
        rates: Option<Vec<f64>>,
        /// Time real forward passes of this checkpoint instead of using the
        /// analytic cost (reporting only).
        #[arg(long)]
        wall_clock: Option<PathBuf>,
    },
    /// Cascade-ranking evaluation of nested subnets (and optionally of
    /// independently trained models).
    Cascade {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        data: DataArgs,
        /// Stage rates, nondecreasing (default: the training list).
        #[arg(long, value_delimiter = ',')]
        rates: Option<Vec<f64>>,
        /// One checkpoint per stage, each used at full width.
        #[arg(long, value_delimiter = ',')]
        independent: Option<Vec<PathBuf>>,
    },
    /// Widen cached small-subnet activations to a larger subnet.
    Widen {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        from: f64,
        #[arg(long)]
        to: f64,
        #[arg(long, value_enum, default_value = "exact")]
        mode: ModeArg,
        /// Examples in the widened batch.
        #[arg(long, default_value_t = 64)]
        batch: usize,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Sweep { .. } => "sweep",
            Command::Cost { .. } => "cost",
            Command::Simulate { .. } => "simulate",
            Command::Cascade { .. } => "cascade",
            Command::Widen { .. } => "widen",
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let out = output::OutDir::resolve(cli.out.clone(), cli.command.name());
    match commands::run(cli.command, out) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
