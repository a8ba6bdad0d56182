//! `fireflow` experiment runner.

mod commands;
mod config;
mod output;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use fireflow::{Schedule, SolverKind};

use config::{Overrides, RunConfig};

#[derive(Debug, Parser)]
#[command(
    name = "fireflow",
    version,
    about = "Rectified-flow solver experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: CommandArgs,
}

#[derive(Debug, Subcommand)]
enum CommandArgs {
    /// Train a velocity model on the source/target mixtures; `--reflow` adds the 2-rectified stage.
    Train(Flags),
    /// Global-error convergence of every solver over a step ladder.
    Convergence(Flags),
    /// Inversion plus reconstruction error over a step ladder.
    Reconstruct(Flags),
    /// Error of the cached midpoint velocity against a fresh evaluation.
    VelocityError(Flags),
    /// Chord-deviation straightness of generated trajectories.
    Straightness(Flags),
    /// Backward propagation of a terminal perturbation on an analytic field.
    Perturb(Flags),
    /// Energy distance between generated samples and fresh target samples.
    Energy(Flags),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Train,
    Convergence,
    Reconstruct,
    VelocityError,
    Straightness,
    Perturb,
    Energy,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Convergence => "convergence",
            Command::Reconstruct => "reconstruct",
            Command::VelocityError => "velocity-error",
            Command::Straightness => "straightness",
            Command::Perturb => "perturb",
            Command::Energy => "energy",
        }
    }
}

/// Flags shared by every command. Each overrides the `--config` file.
#[derive(Debug, Args)]
struct Flags {
    /// TOML run configuration; flags take precedence over its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Analytic field: constant:c1,c2,.. | linear:a | time:p0,p1,..
    #[arg(long, allow_hyphen_values = true)]
    field: Option<String>,
    /// Trained model checkpoint (JSON).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// euler | midpoint | heun | fireflow
    #[arg(long)]
    solver: Option<SolverKind>,
    /// uniform | power:GAMMA
    #[arg(long)]
    schedule: Option<Schedule>,
    /// Step counts, comma separated.
    #[arg(long, value_delimiter = ',')]
    steps: Option<Vec<usize>>,
    #[arg(long)]
    samples: Option<usize>,
    /// Start point, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    x0: Option<Vec<f64>>,
    /// Perturbation horizon T.
    #[arg(long)]
    horizon: Option<f64>,
    /// Terminal perturbation, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    delta: Option<Vec<f64>>,
    /// NFE budget for equal-cost solver comparisons.
    #[arg(long)]
    nfe: Option<u64>,
    /// Number of sampling seeds.
    #[arg(long)]
    seeds: Option<usize>,
    /// Also run reflow (2-rectified flow) after training.
    #[arg(long)]
    reflow: bool,
    #[arg(long)]
    reflow_pairs: Option<usize>,
    /// Worker threads (0 = one per core); results do not depend on it.
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Hidden layer widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
}

impl Flags {
    fn into_config(self, command: Command) -> Result<RunConfig> {
        let mut config = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        config.apply(Overrides {
            seed: self.seed,
            out: self.out,
            field: self.field,
            checkpoint: self.checkpoint,
            solver: self.solver,
            schedule: self.schedule,
            steps: self.steps,
            samples: self.samples,
            x0: self.x0,
            horizon: self.horizon,
            delta: self.delta,
            nfe: self.nfe,
            seeds: self.seeds,
            reflow: self.reflow,
            reflow_pairs: self.reflow_pairs,
            workers: self.workers,
            batch_size: self.batch_size,
            iterations: self.iterations,
            learning_rate: self.learning_rate,
            hidden: self.hidden,
        });
        config.resolve(command)
    }
}

fn run(cli: Cli) -> Result<()> {
    let (command, flags) = match cli.command {
        CommandArgs::Train(f) => (Command::Train, f),
        CommandArgs::Convergence(f) => (Command::Convergence, f),
        CommandArgs::Reconstruct(f) => (Command::Reconstruct, f),
        CommandArgs::VelocityError(f) => (Command::VelocityError, f),
        CommandArgs::Straightness(f) => (Command::Straightness, f),
        CommandArgs::Perturb(f) => (Command::Perturb, f),
        CommandArgs::Energy(f) => (Command::Energy, f),
    };
    let config = flags.into_config(command)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .context("building worker pool")?;

    let start = Instant::now();
    let mut out = output::OutputDir::create(&config.out)?;
    out.write_text("config.toml", &config.to_toml()?)?;
    let report = pool.install(|| commands::run(command, &config, &mut out))?;
    out.write_summary(command, &config, report, start.elapsed())?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
