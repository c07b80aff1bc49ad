//! `multiexit`: generate data, place exits, train, calibrate, run adaptive
//! inference, simulate tiers and diagnose, all from one experiment config.

mod config;
mod pipeline;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use config::ExperimentConfig;
use pipeline::{Ctx, Stage};

#[derive(Parser)]
#[command(name = "multiexit", version, about = "Multi-exit network experiments")]
struct Cli {
    /// Output root; the config's `output_dir` is created beneath it.
    #[arg(long, global = true, env = "MULTIEXIT_OUT", default_value = ".")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long, short)]
    config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate or load the dataset and split it 70/15/15.
    Gen(Common),
    /// Choose exit depths from the cost profile.
    Place(Common),
    /// Train the multi-exit network.
    Train(Common),
    /// Calibrate the exit policy on the validation split.
    Calibrate(Common),
    /// Run adaptive inference on the test split.
    Infer(Common),
    /// Replay the exit log on the configured tiers.
    Simulate(Common),
    /// Information-plane and convergence diagnostics.
    Diag(Common),
    /// Every stage the config enables, in order.
    Run(Common),
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let (common, stages) = match cli.command {
        Command::Gen(c) => (c, Some(Stage::Gen)),
        Command::Place(c) => (c, Some(Stage::Place)),
        Command::Train(c) => (c, Some(Stage::Train)),
        Command::Calibrate(c) => (c, Some(Stage::Calibrate)),
        Command::Infer(c) => (c, Some(Stage::Infer)),
        Command::Simulate(c) => (c, Some(Stage::Simulate)),
        Command::Diag(c) => (c, Some(Stage::Diag)),
        Command::Run(c) => (c, None),
    };
    let cfg = ExperimentConfig::read(&common.config)?.resolve(common.seed);
    let ctx = Ctx::new(cfg, &cli.out);
    let stages = stages.map_or_else(|| ctx.enabled_stages(), |s| vec![s]);
    for stage in stages {
        let written = ctx.run_stage(stage)?;
        println!("{}: {}", stage.name(), written.join(", "));
    }
    Ok(())
}
