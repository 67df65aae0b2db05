//! `dynba`: simulate synthetic dynamic scenes, run uncertainty-aware dense
//! bundle adjustment sessions over them, evaluate the recovered
//! trajectories, and spot-check the analytic gradients.
//!
//! Exit codes: 0 on success, 1 on solver or gradient-check failure, 2 on
//! input errors (bad configuration, missing or malformed files, unknown
//! flags).

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "dynba", version, about = "Uncertainty-aware dense bundle adjustment workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene: config echo, ground-truth trajectory,
    /// depth maps, dynamic masks, and a checksummed manifest.
    Simulate {
        /// Scene configuration file (`key = value` lines).
        scene_config: PathBuf,
        /// Output directory for the scene artifacts.
        out_dir: PathBuf,
        /// Overrides the `seed` key of the configuration.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a tracking session over a simulated scene directory.
    Run {
        /// Scene directory produced by `simulate`.
        scene_dir: PathBuf,
        /// Pipeline configuration file (`key = value` lines).
        pipeline_config: PathBuf,
        /// Output directory for the session result.
        out_dir: PathBuf,
        /// Ablation switches to enable, comma-separated or repeated
        /// (full, no_uba, no_depth_prior, coupled_similarity,
        /// no_affine_map, no_weight_decay, no_prior_term).
        #[arg(long, value_delimiter = ',')]
        ablation: Vec<String>,
    },
    /// Evaluate a session result against a ground-truth trajectory.
    Eval {
        /// Session result directory produced by `run`.
        result_dir: PathBuf,
        /// Ground-truth trajectory file (`timestamp tx ty tz qx qy qz qw`).
        gt_trajectory: PathBuf,
        /// Also report ATE against the unit-path-length normalized ground
        /// truth.
        #[arg(long)]
        normalize: bool,
    },
    /// Check analytic gradients against finite differences on random
    /// instances.
    Gradcheck {
        /// Random instances per gradient family.
        #[arg(long, default_value_t = 20)]
        trials: usize,
        /// Base seed for instance generation.
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Corrupt a gradient on purpose to prove the comparator catches it.
        #[arg(long, hide = true)]
        corrupt_gradient: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate { scene_config, out_dir, seed } => {
            commands::cmd_simulate(scene_config, out_dir, *seed)
        }
        Command::Run { scene_dir, pipeline_config, out_dir, ablation } => {
            commands::cmd_run(scene_dir, pipeline_config, out_dir, ablation)
        }
        Command::Eval { result_dir, gt_trajectory, normalize } => {
            commands::cmd_eval(result_dir, gt_trajectory, *normalize)
        }
        Command::Gradcheck { trials, seed, corrupt_gradient } => {
            commands::cmd_gradcheck(*trials, *seed, *corrupt_gradient)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
