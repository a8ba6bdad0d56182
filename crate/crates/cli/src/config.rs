//! Run configuration.
//!
//! Precedence, lowest to highest: built-in defaults, the `--config` TOML
//! file, command-line flags. The resolved configuration is echoed into the
//! output directory as `config.toml` and reproduces the run when passed back
//! through `--config`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use fireflow::{MixtureSpec, Schedule, SolverKind, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::Command;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub hidden: Vec<usize>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            batch_size: d.batch_size,
            iterations: d.iterations,
            learning_rate: d.learning_rate,
            hidden: d.hidden,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// Analytic field, `constant:c1,..`, `linear:a` or `time:p0,..`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
    /// Trained model checkpoint; takes the place of `field`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// Restricts a command to one solver; unset runs all that apply.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub solver: Option<SolverKind>,
    #[serde(with = "schedule_str")]
    pub schedule: Schedule,
    /// Step counts; empty selects the command default.
    pub steps: Vec<usize>,
    /// Sample count; 0 selects the command default.
    pub samples: usize,
    /// Start point; empty selects the command default.
    pub x0: Vec<f64>,
    pub horizon: f64,
    pub delta: Vec<f64>,
    /// NFE budget for commands comparing solvers at equal cost.
    pub nfe: u64,
    pub seeds: usize,
    pub reflow: bool,
    pub reflow_pairs: usize,
    /// Worker threads; 0 uses one per core. Results do not depend on it.
    pub workers: usize,
    pub train: TrainSection,
    pub source: MixtureSpec,
    pub target: MixtureSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1024,
            out: PathBuf::from("out"),
            field: None,
            checkpoint: None,
            solver: None,
            schedule: Schedule::Uniform,
            steps: Vec::new(),
            samples: 0,
            x0: Vec::new(),
            horizon: 1.0,
            delta: Vec::new(),
            nfe: 20,
            seeds: 3,
            reflow: false,
            reflow_pairs: 4096,
            workers: 0,
            train: TrainSection::default(),
            source: MixtureSpec::default_source(),
            target: MixtureSpec::default_target(),
        }
    }
}

mod schedule_str {
    use fireflow::Schedule;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(s: &Schedule, ser: S) -> Result<S::Ok, S::Error> {
        ser.collect_str(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<Schedule, D::Error> {
        let s = String::deserialize(de)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Values given on the command line. `None` leaves the lower layer in place.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub field: Option<String>,
    pub checkpoint: Option<PathBuf>,
    pub solver: Option<SolverKind>,
    pub schedule: Option<Schedule>,
    pub steps: Option<Vec<usize>>,
    pub samples: Option<usize>,
    pub x0: Option<Vec<f64>>,
    pub horizon: Option<f64>,
    pub delta: Option<Vec<f64>>,
    pub nfe: Option<u64>,
    pub seeds: Option<usize>,
    pub reflow: bool,
    pub reflow_pairs: Option<usize>,
    pub workers: Option<usize>,
    pub batch_size: Option<usize>,
    pub iterations: Option<usize>,
    pub learning_rate: Option<f64>,
    pub hidden: Option<Vec<usize>>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).context("parsing config")
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).context("serializing config")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text)
    }

    pub fn apply(&mut self, o: Overrides) {
        macro_rules! set {
            ($($field:ident),*) => { $(if let Some(v) = o.$field { self.$field = v; })* };
        }
        set!(
            seed,
            out,
            schedule,
            steps,
            samples,
            x0,
            horizon,
            delta,
            nfe,
            seeds,
            reflow_pairs,
            workers
        );
        if o.field.is_some() {
            self.field = o.field;
            self.checkpoint = None;
        }
        if o.checkpoint.is_some() {
            self.checkpoint = o.checkpoint;
            self.field = None;
        }
        if o.solver.is_some() {
            self.solver = o.solver;
        }
        self.reflow |= o.reflow;
        if let Some(v) = o.batch_size {
            self.train.batch_size = v;
        }
        if let Some(v) = o.iterations {
            self.train.iterations = v;
        }
        if let Some(v) = o.learning_rate {
            self.train.learning_rate = v;
        }
        if let Some(v) = o.hidden {
            self.train.hidden = v;
        }
    }

    /// Fills command defaults so the echo is complete, and validates.
    pub fn resolve(mut self, command: Command) -> Result<Self> {
        if self.steps.is_empty() {
            self.steps = match command {
                Command::Convergence => vec![4, 8, 16, 32, 64, 128],
                Command::Reconstruct => vec![2, 4, 8, 16, 32],
                Command::VelocityError => vec![10, 20],
                _ => Vec::new(),
            };
        }
        if self.samples == 0 {
            self.samples = match command {
                Command::Energy => 2000,
                Command::VelocityError => 200,
                _ => 1000,
            };
        }
        if self.field.is_some() && self.checkpoint.is_some() {
            bail!("give either a field or a checkpoint, not both");
        }
        if self.steps.contains(&0) {
            bail!("step counts must be positive");
        }
        if !(self.horizon > 0.0 && self.horizon <= 1.0) {
            bail!("horizon must lie in (0, 1]");
        }
        if self.seeds == 0 || self.nfe == 0 {
            bail!("seeds and nfe must be positive");
        }
        Ok(self)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.train.batch_size,
            iterations: self.train.iterations,
            learning_rate: self.train.learning_rate,
            seed: self.seed,
            hidden: self.train.hidden.clone(),
        }
    }
}
