//! Command-line front end: argument parsing, config merging and the
//! subcommand drivers.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use commands::CliError;
use config::FileConfig;

#[derive(Debug, Parser)]
#[command(
    name = "gantrack",
    version,
    about = "Adversarial trajectory prediction with consensus optimization and particle tracking"
)]
pub struct Cli {
    /// TOML config file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a trajectory dataset and write it with a manifest.
    GenData(config::GenDataArgs),
    /// Train the generator and discriminator, optionally as a gamma sweep.
    Train(config::TrainArgs),
    /// Compare pooled rollout distributions with the true system.
    Eval(config::EvalArgs),
    /// Track one dataset case with the mixture particle filter.
    Track(config::TrackArgs),
    /// Tabulate rollout MAE of the GAN and the baselines per horizon.
    Baseline(config::BaselineArgs),
    /// Kalman-smooth trajectories from a CSV file.
    Smooth(config::SmoothArgs),
}

macro_rules! merged {
    ($file:expr, $section:ident, $args:expr) => {{
        let mut cfg = $file.$section.clone().unwrap_or_default();
        $args.apply(&mut cfg);
        cfg
    }};
}

/// Runs a parsed command line.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    let file = match &cli.config {
        Some(p) => FileConfig::load(p).map_err(CliError::Usage)?,
        None => FileConfig::default(),
    };
    match &cli.command {
        Command::GenData(a) => commands::gen_data(&merged!(file, gen_data, a)),
        Command::Train(a) => commands::train(&merged!(file, train, a)),
        Command::Eval(a) => commands::eval(&merged!(file, eval, a)),
        Command::Track(a) => commands::track_case(&merged!(file, track, a)),
        Command::Baseline(a) => commands::baseline(&merged!(file, baseline, a)),
        Command::Smooth(a) => commands::smooth_tracks(&merged!(file, smooth, a)),
    }
}
