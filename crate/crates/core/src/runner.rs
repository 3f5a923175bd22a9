//! Running scenarios: one at a time or a whole directory in parallel.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::scenario::{Scenario, ScenarioError};
use crate::sim::metrics::MetricsReport;
use crate::sim::{SimError, Simulation};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("run aborted: {0}")]
    Sim(#[from] SimError),
    #[error("cannot read directory {path}: {message}")]
    Dir { path: String, message: String },
}

impl RunError {
    /// Bad invocation rather than a bad scenario or a failed run.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            RunError::Scenario(ScenarioError::UnknownParameter(_) | ScenarioError::BadValue { .. })
        )
    }
}

/// Applies `key=value` overrides and runs the scenario to its duration.
pub fn run<S: AsRef<str>>(scenario: &Scenario, overrides: &[S]) -> Result<MetricsReport, RunError> {
    let mut s = scenario.clone();
    s.apply_overrides(overrides)?;
    let mut sim = Simulation::new(&s)?;
    Ok(sim.run()?)
}

pub fn run_path<S: AsRef<str>>(path: &Path, overrides: &[S]) -> Result<MetricsReport, RunError> {
    run(&Scenario::from_path(path)?, overrides)
}

/// `*.scenario` files of a directory, sorted by name.
pub fn scenario_files(dir: &Path) -> Result<Vec<PathBuf>, RunError> {
    let err = |e: std::io::Error| RunError::Dir {
        path: dir.display().to_string(),
        message: e.to_string(),
    };
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(err)? {
        let p = entry.map_err(err)?.path();
        if p.extension().is_some_and(|e| e == "scenario") {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

pub struct BatchItem {
    pub path: PathBuf,
    pub result: Result<MetricsReport, RunError>,
}

/// Runs every scenario of `dir`, each on its own thread and engine.
pub fn batch<S: AsRef<str> + Sync>(dir: &Path, overrides: &[S]) -> Result<Vec<BatchItem>, RunError> {
    let files = scenario_files(dir)?;
    Ok(std::thread::scope(|scope| {
        let handles: Vec<_> = files
            .iter()
            .map(|p| scope.spawn(move || run_path(p, overrides)))
            .collect();
        files
            .iter()
            .zip(handles)
            .map(|(p, h)| BatchItem {
                path: p.clone(),
                result: h.join().expect("scenario thread panicked"),
            })
            .collect()
    }))
}
