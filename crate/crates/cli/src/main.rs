//! `georeg`: file-based driver for the georegistration pipelines.

mod commands;
mod error;
mod manifest;

use clap::{Args, Parser, Subcommand};
use error::CliError;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Debug, Parser)]
#[command(name = "georeg", version, about = "Metadata-free georegistration of photogrammetric models")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// JSON configuration file for the subcommand; flags win on conflict.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every randomized stage (default 0; synth defaults to the spec's seed).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: available parallelism). Results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Where to write the run manifest (default: next to the primary output).
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Cyclic-consistency and confidence filtering of a dense flow pair.
    FilterMatches(commands::FilterArgs),
    /// Plane fit on ground-labelled points and up-vector disambiguation.
    EstimateGravity(commands::GravityArgs),
    /// Airborne model to satellite DSM registration.
    #[command(name = "register-air2sat")]
    RegisterAir2Sat(commands::AirSatArgs),
    /// Exhaustive ground-image-to-tile matching with pooled consensus.
    #[command(name = "register-ground2air")]
    RegisterGround2Air(commands::GroundAirArgs),
    /// Robust rigid ICP refinement of a transform between two clouds.
    IcpRefine(commands::IcpArgs),
    /// Error statistics of estimated against ground-truth cameras.
    Evaluate(commands::EvaluateArgs),
    /// Write a synthetic scene with exact ground truth.
    Synth(commands::SynthArgs),
    /// Overlapping tile grid over a set of renders.
    TilePlan(commands::TilePlanArgs),
    /// Render pose specifications around a scene.
    ObliquePoses(commands::ObliqueArgs),
}

fn report(e: &CliError) {
    eprintln!("{}", serde_json::to_string(e).expect("error serializes"));
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            let _ = e.print();
            return ExitCode::from(1);
        }
        Err(e) => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    if let Some(n) = cli.global.threads {
        if n == 0 {
            report(&CliError::usage("--threads must be at least 1"));
            return ExitCode::from(1);
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().expect("thread pool is configured once");
    }
    match commands::run(&cli.global, cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report(&e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
