mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "attzoom",
    version,
    about = "Attention-Zoom training, search and visualization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one or both arms and print a comparison table.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = Arm::Both)]
        arm: Arm,
    },
    /// Random hyperparameter search; writes a leaderboard CSV.
    Search {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = Arm::Both)]
        arm: Arm,
        /// Concurrent trials (0 = all cores).
        #[arg(long, default_value_t = 0)]
        jobs: usize,
    },
    /// Evaluate a checkpoint; writes metrics JSON.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        split: Option<EvalSplit>,
    },
    /// Grad-CAM, attention heatmaps and warped images as PPM files.
    Visualize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of images (overrides the config).
        #[arg(long)]
        n: Option<usize>,
    },
    /// Finite-difference check of every op and the full AttZoom layer.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-6)]
        tolerance: f64,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Global seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Arm {
    Baseline,
    Attzoom,
    Both,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalSplit {
    Train,
    Val,
    Test,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let diverged = err.chain().any(|e| {
        matches!(
            e.downcast_ref::<attzoom_core::Error>(),
            Some(attzoom_core::Error::Divergence { .. })
        )
    });
    if diverged {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ATTZOOM_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { common, arm } => {
            commands::train(&common.config, common.seed, common.out.as_deref(), arm)
        }
        Command::Search { common, arm, jobs } => commands::search(
            &common.config,
            common.seed,
            common.out.as_deref(),
            arm,
            jobs,
        ),
        Command::Eval {
            common,
            checkpoint,
            split,
        } => commands::eval(
            &common.config,
            common.seed,
            common.out.as_deref(),
            &checkpoint,
            split,
        ),
        Command::Visualize {
            common,
            checkpoint,
            n,
        } => commands::visualize(
            &common.config,
            common.seed,
            common.out.as_deref(),
            &checkpoint,
            n,
        ),
        Command::Gradcheck { seed, tolerance } => commands::gradcheck(seed, tolerance),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
