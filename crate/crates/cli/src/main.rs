//! `salt`: data generation, training, evaluation, profiling and attention
//! dumps for the partitioned linear attention models in `salt-core`.
//!
//! Exit codes: 0 on success, 1 on a usage error, 2 on a data or model error.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use salt_core::jet::SortKey;
use salt_core::model::Variant;
use salt_core::DType;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] salt_core::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(_) => 2,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "salt", version, about = "Partitioned linear attention for jet tagging")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Draw labelled synthetic jets into `jets.jsonl`.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Number of jets to draw.
        #[arg(long)]
        n_jets: Option<usize>,
        /// Number of jet classes (prong multiplicities).
        #[arg(long)]
        classes: Option<usize>,
    },
    /// Reorder the particles of every jet; with `--n` also truncate and pad.
    Sort {
        #[command(flatten)]
        common: Common,
        /// Input jet file (one JSON record per line).
        #[arg(long)]
        data: PathBuf,
        #[arg(long = "sort", visible_alias = "key")]
        key: Option<SortKey>,
        /// Truncate or pad to this many particles and write `sorted.bin`.
        #[arg(long)]
        n: Option<usize>,
        /// Particles with pt at or below this are dropped when `--n` is set.
        #[arg(long)]
        pt_min: Option<f64>,
    },
    /// Train a model; writes `model.ckpt`, `history.csv`, `scaler.json` and `train.json`.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        data: PathBuf,
        /// Replace the phase schedule by one phase of this many epochs.
        #[arg(long)]
        epochs: Option<usize>,
        /// Replace the phase schedule by one phase with this batch size.
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        pt_min: Option<f64>,
        /// Trailing fraction of the data held out for validation.
        #[arg(long)]
        val_fraction: Option<f64>,
    },
    /// Score a jet file with a trained model; writes `scores.csv` and `report.json`.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: EvalInputs,
    },
    /// Accuracy per particle-multiplicity bin; writes `bins.csv`.
    BinnedEval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: EvalInputs,
        /// Ascending bin edges, e.g. `0,10,20,40`.
        #[arg(long, value_delimiter = ',')]
        bins: Option<Vec<usize>>,
    },
    /// Print the analytic FLOP count, parameter count and activation memory.
    Flops {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        /// Batch size for the activation-memory estimate.
        #[arg(long)]
        batch: Option<usize>,
        /// Also tabulate FLOPs at these sequence lengths into `scaling.csv`.
        #[arg(long, value_delimiter = ',')]
        scan: Option<Vec<usize>>,
    },
    /// Time forward passes on synthetic jets; writes `latency.json` when `--out` is set.
    Bench {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        /// Checkpoint to benchmark instead of a freshly initialised model.
        #[arg(long = "model")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        warmup: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
    },
    /// Write the attention logits and weights of one jet as CSV files.
    DumpAttn {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        /// Checkpoint to inspect instead of a freshly initialised model.
        #[arg(long = "model")]
        checkpoint: Option<PathBuf>,
        /// Scaler saved by `train` (defaults to `scaler.json` beside the checkpoint).
        #[arg(long)]
        scaler: Option<PathBuf>,
        /// Jet file; a synthetic jet is drawn when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Index of the jet within `--data`.
        #[arg(long, default_value_t = 0)]
        jet: usize,
        /// Attention layer to dump.
        #[arg(long, default_value_t = 0)]
        layer: usize,
    },
}

/// Flags shared by every command.
#[derive(Debug, Args)]
struct Common {
    /// TOML file with optional `seed` and `[model]`, `[train]`, `[data]` tables.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory receiving every output file.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

/// Model flags; each overrides the matching `[model]` entry of `--config`.
#[derive(Debug, Default, Args)]
struct ModelArgs {
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long = "sort", visible_alias = "key")]
    sort_key: Option<SortKey>,
    #[arg(long)]
    n: Option<usize>,
    /// Projection rows (partitions) per head.
    #[arg(long)]
    p: Option<usize>,
    /// Convolution kernel heights, e.g. `1,3,5`.
    #[arg(long, value_delimiter = ',')]
    filters: Option<Vec<usize>>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    dtype: Option<DType>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    no_conv: bool,
    #[arg(long)]
    no_partition: bool,
    #[arg(long)]
    partition_key_only: bool,
    #[arg(long)]
    partition_value_only: bool,
    #[arg(long)]
    share_ef: bool,
}

/// Inputs of the evaluation commands.
#[derive(Debug, Args)]
struct EvalInputs {
    /// Checkpoint written by `train`.
    #[arg(long = "model")]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Scaler saved by `train` (defaults to `scaler.json` beside the checkpoint).
    #[arg(long)]
    scaler: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            // Printing only fails when stdout or stderr is closed.
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
