//! Output directory bookkeeping and the run summary.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;

use crate::config::RunConfig;
use crate::Command;

/// What a command hands back for the summary.
pub struct Report {
    pub metrics: Value,
    /// Velocity evaluations spent by the solvers, instrumentation excluded.
    pub nfe_total: u64,
}

#[derive(Serialize)]
struct Summary<'a> {
    command: &'static str,
    seed: u64,
    wall_clock_seconds: f64,
    nfe_total: u64,
    csv: &'a [String],
    svg: &'a [String],
    files: &'a [String],
    metrics: Value,
}

pub struct OutputDir {
    dir: PathBuf,
    csv: Vec<String>,
    svg: Vec<String>,
    files: Vec<String>,
}

impl OutputDir {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            csv: Vec::new(),
            svg: Vec::new(),
            files: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn put(&self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.path(name);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> Result<()> {
        self.put(name, text.as_bytes())?;
        self.files.push(name.to_string());
        Ok(())
    }

    /// Runs `fill` against an in-memory buffer, then writes it out.
    pub fn write_csv(
        &mut self,
        name: &str,
        fill: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>,
    ) -> Result<()> {
        let mut buf = Vec::new();
        fill(&mut buf).with_context(|| format!("formatting {name}"))?;
        self.put(name, &buf)?;
        self.csv.push(name.to_string());
        Ok(())
    }

    pub fn write_svg(&mut self, name: &str, svg: &str) -> Result<()> {
        self.put(name, svg.as_bytes())?;
        self.svg.push(name.to_string());
        Ok(())
    }

    /// Registers a file written directly by a library call.
    pub fn record(&mut self, name: &str) {
        self.files.push(name.to_string());
    }

    pub fn write_summary(
        &mut self,
        command: Command,
        config: &RunConfig,
        report: Report,
        elapsed: Duration,
    ) -> Result<()> {
        let summary = Summary {
            command: command.name(),
            seed: config.seed,
            wall_clock_seconds: elapsed.as_secs_f64(),
            nfe_total: report.nfe_total,
            csv: &self.csv,
            svg: &self.svg,
            files: &self.files,
            metrics: report.metrics,
        };
        let text = serde_json::to_string_pretty(&summary)? + "\n";
        self.put("summary.json", text.as_bytes())
    }
}
