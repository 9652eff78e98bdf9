use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ebcn_core::Category;

mod commands;
mod run;

/// Train, evaluate, compose and analyze energy-based constraint networks.
///
/// Every subcommand reads an optional key-value config (`--config`) whose
/// values `--set KEY=VALUE` overrides. Artifacts go to a run directory
/// under `--runs-dir` named by command, config hash and seed.
///
/// Exit codes: 0 success, 2 config error, 3 data error, 4 numeric fault.
#[derive(Parser)]
#[command(name = "ebcn", version)]
struct Cli {
    /// Run seed for generation, corruption, splits and initialization;
    /// overrides `seed` from the config (default 0).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Parent directory of run directories.
    #[arg(long, global = true, default_value = "runs")]
    runs_dir: PathBuf,

    /// Log progress (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
pub struct ConfigArgs {
    /// Key-value config file (`key = value` per line).
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Override one config key, e.g. `--set train.epochs=3` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

/// Evaluation data: a paired cache, or a corpus cache corrupted with
/// `corruption.*` settings and the run seed.
#[derive(Args, Clone, Debug, Default)]
pub struct DataArgs {
    /// Cache of coherent/corrupted twins.
    #[arg(long, conflicts_with = "corpus")]
    pub pairs: Option<PathBuf>,

    /// Cache of coherent sequences.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic coherent corpus (`testbed.*`).
    GenSynthetic {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Corrupt a corpus into a paired cache (`corruption.*`).
    Corrupt {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Train one branch (`net.*`, `train.*`, `corruption.*`).
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Coherent sequences to corrupt on the fly.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Fixed external pairs.
        #[arg(long)]
        pairs: Option<PathBuf>,
    },
    /// Paired accuracy and AUC of a checkpoint (`eval.trained_kinds`).
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Evaluate a branch ensemble described by a manifest file.
    Compose {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Ensemble manifest (`structural.checkpoint`, `local.checkpoint`, `beta`, `gate`, ...).
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Decide the frequency-branch gate on calibration pairs (`gate.tau`).
    CalibrateGate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Displacement similarity between corruption kinds (`analysis.*`).
    AnalyzeDisplacement {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Re-aggregate stored energies over a grid of alpha values.
    SweepAlpha {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Per-position energy heatmaps and the propagation profile.
    ExportHeatmap {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Validate a cache file and print its header, records and counts.
    CacheInspect {
        /// Cache file to read.
        input: PathBuf,
    },
}

fn exit_code(c: Category) -> u8 {
    match c {
        Category::Config => 2,
        Category::Data => 3,
        Category::Numeric => 4,
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
    let ctx = commands::Context {
        seed: cli.seed,
        runs_dir: cli.runs_dir,
    };
    match commands::dispatch(&ctx, cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.category().as_str());
            ExitCode::from(exit_code(e.category()))
        }
    }
}
