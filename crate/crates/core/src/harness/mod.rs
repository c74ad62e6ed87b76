//! Experiment execution: sweeps, trials, result files and aggregation.
//!
//! Layout of a results tree:
//!
//! ```text
//! <out>/<name>/experiment.toml      spec snapshot
//! <out>/<name>/aggregate.csv        one row per cell
//! <out>/<name>/runs/c000_t00/       one directory per (cell, trial)
//!     run.json                      config, seeds and config hash
//!     metrics.csv                   one MetricRecord per evaluation
//!     status.json                   completed | diverged, plus run summary
//! ```

pub mod aggregate;
pub mod config;
pub mod presets;
pub mod run;

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use aggregate::{AggregateRow, Stat};
pub use config::{Cell, ExperimentSpec, RunSpec};
pub use run::{execute_run, RunOutcome, RunStatus, RunSummary, Seeds};

use crate::error::{Error, Result};
use crate::metrics::{read_metrics_csv, write_metrics_csv};

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Results root; `None` keeps everything in memory.
    pub out_dir: Option<PathBuf>,
    /// Re-run cells that already have a matching completed run on disk.
    pub force: bool,
    /// Worker threads; `None` uses rayon's default.
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub trial: usize,
    pub seeds: Seeds,
    pub outcome: RunOutcome,
    /// `true` when loaded from an earlier invocation.
    pub reused: bool,
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub cell: Cell,
    pub trials: Vec<TrialResult>,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub spec: ExperimentSpec,
    pub cells: Vec<CellResult>,
    pub aggregate: Vec<AggregateRow>,
    pub dir: Option<PathBuf>,
}

impl ExperimentResult {
    pub fn sweep_keys(&self) -> Vec<String> {
        self.spec.sweep.keys().cloned().collect()
    }

    pub fn aggregate_csv(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        aggregate::write_aggregate_csv(&mut buf, &self.sweep_keys(), &self.aggregate)?;
        Ok(buf)
    }

    /// Cell whose labels include every `(key, value)` pair given.
    pub fn find_cell(&self, want: &[(&str, &str)]) -> Option<&CellResult> {
        self.cells.iter().find(|c| {
            want.iter()
                .all(|(k, v)| c.cell.labels.iter().any(|(lk, lv)| lk == k && lv == v))
        })
    }
}

#[derive(Serialize, Deserialize)]
struct RunMeta {
    experiment: String,
    cell: usize,
    trial: usize,
    sweep: Vec<(String, String)>,
    config: RunSpec,
    seeds: Seeds,
    config_hash: String,
}

fn config_hash(spec: &RunSpec, seeds: &Seeds) -> Result<String> {
    let canonical = serde_json::to_vec(&(spec, seeds))?;
    Ok(Sha256::digest(&canonical)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    use std::io::Write;
    let dir = path
        .parent()
        .ok_or_else(|| Error::Config(format!("{} has no parent", path.display())))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn run_dir(root: &Path, cell: usize, trial: usize) -> PathBuf {
    root.join("runs").join(format!("c{cell:03}_t{trial:02}"))
}

/// Loads a finished run if its config hash matches.
fn load_run(dir: &Path, hash: &str) -> Option<RunOutcome> {
    let meta: RunMeta = serde_json::from_slice(&std::fs::read(dir.join("run.json")).ok()?).ok()?;
    if meta.config_hash != hash {
        return None;
    }
    let summary: RunSummary =
        serde_json::from_slice(&std::fs::read(dir.join("status.json")).ok()?).ok()?;
    let records = read_metrics_csv(std::fs::File::open(dir.join("metrics.csv")).ok()?).ok()?;
    Some(RunOutcome { summary, records })
}

fn save_run(dir: &Path, meta: &RunMeta, outcome: &RunOutcome) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    // status.json goes last: its presence marks the run complete.
    let _ = std::fs::remove_file(dir.join("status.json"));
    write_atomic(&dir.join("run.json"), &serde_json::to_vec_pretty(meta)?)?;
    let mut metrics = Vec::new();
    write_metrics_csv(&mut metrics, &outcome.records)?;
    write_atomic(&dir.join("metrics.csv"), &metrics)?;
    write_atomic(
        &dir.join("status.json"),
        &serde_json::to_vec_pretty(&outcome.summary)?,
    )?;
    Ok(())
}

/// Runs every `(cell, trial)` of `spec`, writing results when an output
/// directory is set. Cells run in parallel; results do not depend on the
/// thread count.
pub fn run_experiment(spec: &ExperimentSpec, opts: &RunOptions) -> Result<ExperimentResult> {
    let cells = spec.validate()?;
    let root = opts.out_dir.as_ref().map(|d| d.join(&spec.name));
    if let Some(root) = &root {
        std::fs::create_dir_all(root.join("runs"))?;
        write_atomic(
            &root.join("experiment.toml"),
            spec.to_toml_string()?.as_bytes(),
        )?;
    }

    let jobs: Vec<(usize, usize)> = (0..cells.len())
        .flat_map(|c| (0..spec.trials).map(move |t| (c, t)))
        .collect();
    let run_job = |&(c, t): &(usize, usize)| -> Result<TrialResult> {
        let cell = &cells[c];
        let seeds = Seeds::resolve(&cell.spec, spec.master_seed, c, t);
        let hash = config_hash(&cell.spec, &seeds)?;
        let dir = root.as_ref().map(|r| run_dir(r, c, t));
        if let (Some(dir), false) = (&dir, opts.force) {
            if let Some(outcome) = load_run(dir, &hash) {
                return Ok(TrialResult {
                    trial: t,
                    seeds,
                    outcome,
                    reused: true,
                });
            }
        }
        let outcome = execute_run(&cell.spec, &seeds)?;
        if let Some(dir) = &dir {
            let meta = RunMeta {
                experiment: spec.name.clone(),
                cell: c,
                trial: t,
                sweep: cell.labels.clone(),
                config: cell.spec.clone(),
                seeds,
                config_hash: hash,
            };
            save_run(dir, &meta, &outcome)?;
        }
        Ok(TrialResult {
            trial: t,
            seeds,
            outcome,
            reused: false,
        })
    };

    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = opts.threads {
        builder = builder.num_threads(n.max(1));
    }
    let pool = builder.build().map_err(|e| Error::Config(e.to_string()))?;
    let results: Vec<TrialResult> =
        pool.install(|| jobs.par_iter().map(run_job).collect::<Result<_>>())?;

    let mut iter = results.into_iter();
    let cell_results: Vec<CellResult> = cells
        .into_iter()
        .map(|cell| CellResult {
            trials: iter.by_ref().take(spec.trials).collect(),
            cell,
        })
        .collect();
    let aggregate = cell_results
        .iter()
        .map(|cr| {
            let outcomes: Vec<RunOutcome> = cr.trials.iter().map(|t| t.outcome.clone()).collect();
            aggregate::aggregate_cell(
                cr.cell.index,
                cr.cell.labels.clone(),
                &outcomes,
                cr.cell.spec.engine.epochs,
            )
        })
        .collect();
    let result = ExperimentResult {
        spec: spec.clone(),
        cells: cell_results,
        aggregate,
        dir: root.clone(),
    };
    if let Some(root) = &root {
        write_atomic(&root.join("aggregate.csv"), &result.aggregate_csv()?)?;
    }
    Ok(result)
}

/// Reads `<dir>/aggregate.csv` and renders it for a terminal.
pub fn report(dir: &Path) -> Result<String> {
    let path = if dir.is_file() {
        dir.to_path_buf()
    } else {
        dir.join("aggregate.csv")
    };
    let file = std::fs::File::open(&path)
        .map_err(|e| Error::Config(format!("cannot open {}: {e}", path.display())))?;
    let (header, rows) = aggregate::read_aggregate_csv(file)?;
    Ok(aggregate::render_table(&header, &rows))
}
