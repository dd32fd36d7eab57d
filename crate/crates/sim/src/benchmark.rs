//! Paired assisted/unassisted runs over a seeded suite.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::engine::{SimError, Simulation};
use crate::scenario::{Scenario, ScenarioError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteSpec {
    /// Scenario file, relative to the suite directory.
    pub scenario: PathBuf,
    pub seeds: Vec<u64>,
    /// Largest acceptable assisted/unassisted mean completion-time ratio.
    #[serde(default = "default_ratio")]
    pub target_ratio: f64,
}

fn default_ratio() -> f64 {
    0.85
}

#[derive(Debug, thiserror::Error)]
pub enum BenchmarkError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("suite.toml: {0}")]
    Parse(String),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub completed: bool,
    /// Completion time, or the full run length when the task was not done.
    pub time: f64,
    pub collisions: u64,
    pub solver_failures: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub seed: u64,
    pub assisted: RunSummary,
    pub unassisted: RunSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub rows: Vec<BenchmarkRow>,
    pub assisted_mean: f64,
    pub unassisted_mean: f64,
    pub ratio: f64,
    pub target_ratio: f64,
    pub assisted_collisions: u64,
    pub unassisted_collisions: u64,
}

impl BenchmarkReport {
    /// Ratio target met and no assisted collisions.
    pub fn passed(&self) -> bool {
        self.ratio <= self.target_ratio && self.assisted_collisions == 0
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:>6}  {:>10} {:>5} {:>5}  {:>10} {:>5} {:>5}",
            "seed", "assisted", "done", "coll", "unassisted", "done", "coll"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:>6}  {:>10.2} {:>5} {:>5}  {:>10.2} {:>5} {:>5}",
                r.seed,
                r.assisted.time,
                yes_no(r.assisted.completed),
                r.assisted.collisions,
                r.unassisted.time,
                yes_no(r.unassisted.completed),
                r.unassisted.collisions
            );
        }
        let _ = writeln!(
            out,
            "mean    {:>10.2} {:>11}  {:>10.2}",
            self.assisted_mean, self.assisted_collisions, self.unassisted_mean
        );
        let _ = writeln!(
            out,
            "ratio {:.3} (target <= {:.2}), assisted collisions {}: {}",
            self.ratio,
            self.target_ratio,
            self.assisted_collisions,
            if self.passed() { "PASS" } else { "FAIL" }
        );
        out
    }
}

fn yes_no(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

pub fn run_once(scenario: &Scenario) -> Result<RunSummary, SimError> {
    let out = Simulation::new(scenario)?.run();
    let m = out.metrics;
    let full = out.records.last().map_or(0.0, |r| r.time);
    Ok(RunSummary {
        completed: m.completed(),
        time: m.completion_time.unwrap_or(full),
        collisions: m.collisions,
        solver_failures: m.solver_failures,
    })
}

/// Run every seed with and without assistance. Seeds run in parallel; each
/// run is deterministic so the report does not depend on scheduling.
pub fn run_pairs(scenario: &Scenario, seeds: &[u64], target_ratio: f64) -> Result<BenchmarkReport, SimError> {
    let threads = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(seeds.len().max(1));
    let chunk = seeds.len().div_ceil(threads).max(1);
    let results: Vec<Result<Vec<BenchmarkRow>, SimError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|&seed| {
                            let s = scenario.with_seed(seed);
                            Ok(BenchmarkRow {
                                seed,
                                assisted: run_once(&s.with_assist(true))?,
                                unassisted: run_once(&s.with_assist(false))?,
                            })
                        })
                        .collect()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("benchmark worker panicked"))
            .collect()
    });
    let mut rows = Vec::with_capacity(seeds.len());
    for r in results {
        rows.extend(r?);
    }
    let n = rows.len().max(1) as f64;
    let assisted_mean = rows.iter().map(|r| r.assisted.time).sum::<f64>() / n;
    let unassisted_mean = rows.iter().map(|r| r.unassisted.time).sum::<f64>() / n;
    Ok(BenchmarkReport {
        assisted_collisions: rows.iter().map(|r| r.assisted.collisions).sum(),
        unassisted_collisions: rows.iter().map(|r| r.unassisted.collisions).sum(),
        ratio: assisted_mean / unassisted_mean,
        assisted_mean,
        unassisted_mean,
        target_ratio,
        rows,
    })
}

pub fn load_suite(dir: &Path) -> Result<(SuiteSpec, Scenario), BenchmarkError> {
    let path = dir.join("suite.toml");
    let text = std::fs::read_to_string(&path).map_err(|source| BenchmarkError::Io { path, source })?;
    let suite: SuiteSpec = toml::from_str(&text).map_err(|e| BenchmarkError::Parse(e.to_string()))?;
    if suite.seeds.is_empty() {
        return Err(BenchmarkError::Parse("seeds: at least one seed is required".into()));
    }
    let scenario = Scenario::load(&dir.join(&suite.scenario))?;
    Ok((suite, scenario))
}

pub fn run_suite(dir: &Path) -> Result<BenchmarkReport, BenchmarkError> {
    let (suite, scenario) = load_suite(dir)?;
    Ok(run_pairs(&scenario, &suite.seeds, suite.target_ratio)?)
}
