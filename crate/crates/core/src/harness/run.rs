//! Executes a single configured run end to end.

use serde::{Deserialize, Serialize};

use super::config::RunSpec;
use crate::data::{partition_by_class, partition_iid, synth_gaussian_blobs, Partition};
use crate::engine::{draw_stopping_index, Simulation};
use crate::error::{Error, Result};
use crate::graph::{metropolis_weights, spectral_gap};
use crate::metrics::{global_eval, MetricRecord};
use crate::model::{init_params, NetworkShape};
use crate::rng::{self, tag};

/// Fully resolved seeds of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub run: u64,
    pub data: u64,
    pub model: u64,
    pub graph: u64,
}

impl Seeds {
    /// Explicit seeds in `spec` win. Otherwise data, model and graph seeds
    /// depend only on `(master, trial)`, so every cell of a trial sees the
    /// same dataset, network signs and graph draw; the run seed (sampling
    /// and compression randomness) also depends on the cell.
    pub fn resolve(spec: &RunSpec, master: u64, cell: usize, trial: usize) -> Self {
        let t = trial as u64;
        Seeds {
            run: spec
                .engine
                .run_seed
                .unwrap_or_else(|| rng::derive_seed(master, &[tag::CELL, cell as u64, t])),
            data: spec
                .data
                .data_seed
                .unwrap_or_else(|| rng::derive_seed(master, &[tag::DATA, t])),
            model: spec
                .model
                .model_seed
                .unwrap_or_else(|| rng::derive_seed(master, &[tag::INIT, t])),
            graph: spec
                .graph
                .graph_seed
                .unwrap_or_else(|| rng::derive_seed(master, &[tag::GRAPH, t])),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Diverged { iteration: u64, worker: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    #[serde(flatten)]
    pub status: RunStatus,
    pub dim: usize,
    pub spectral_gap: f64,
    pub delta: f64,
    pub rounds_per_epoch: usize,
    pub iterations: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stopping_index: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub summary: RunSummary,
    pub records: Vec<MetricRecord>,
}

impl RunOutcome {
    pub fn diverged(&self) -> bool {
        matches!(self.summary.status, RunStatus::Diverged { .. })
    }

    pub fn final_record(&self) -> Option<&MetricRecord> {
        self.records.last()
    }

    /// First record at or after `fraction` of the configured epochs.
    pub fn record_at_fraction(&self, fraction: f64, epochs: u64) -> Option<&MetricRecord> {
        let target = (fraction * epochs as f64).ceil() as u64;
        self.records.iter().find(|r| r.epoch >= target)
    }
}

/// Builds data, graph and network from `spec`, trains, and evaluates at
/// epoch 0, every `eval_every` epochs and at the end.
///
/// Divergence ends the run early with status `diverged`; it is a result,
/// not an error.
pub fn execute_run(spec: &RunSpec, seeds: &Seeds) -> Result<RunOutcome> {
    spec.validate()?;
    let m = &spec.model;
    let (train, test) = synth_gaussian_blobs(
        spec.data.n_per_class,
        m.input_dim,
        m.n_classes,
        spec.data.class_sep,
        seeds.data,
    )?;
    let graph = spec.graph.build(seeds.graph)?;
    let mixing = metropolis_weights(&graph)?;
    let rho = spectral_gap(&mixing)?;
    let shards = match spec.data.partition {
        Partition::Iid => partition_iid(&train, graph.n_workers(), seeds.data)?,
        Partition::ByClass => partition_by_class(&train, graph.n_workers())?,
    };
    let shape = NetworkShape::new(
        m.input_dim,
        m.width,
        m.n_classes,
        rng::derive_seed(seeds.model, &[tag::SIGNS]),
    )?;
    let theta0 = init_params(
        &shape,
        m.init_scale,
        &mut rng::derived_stream(seeds.model, &[tag::INIT]),
    )?;
    let config = spec.run_config();
    let delta = config.compressor.delta(shape.dim())?;
    let loss = config.loss;
    let mut sim = Simulation::new(
        config, &shape, &train, &graph, mixing, shards, &theta0, seeds.run,
    )?;

    let epochs = spec.engine.epochs;
    let total = epochs * sim.rounds_per_epoch() as u64;
    let stopping_index = spec
        .engine
        .draw_stopping_index
        .then(|| draw_stopping_index(total, &mut rng::derived_stream(seeds.run, &[tag::STOPPING])));
    let stop_at = stopping_index.unwrap_or(total);

    let eval = |sim: &Simulation| {
        global_eval(
            &shape,
            loss,
            &sim.thetas(),
            &train,
            &test,
            sim.epoch(),
            sim.iteration(),
            sim.cumulative_bytes(),
        )
    };
    let mut records = vec![eval(&sim)?];
    let mut status = RunStatus::Completed;
    while sim.iteration() < stop_at {
        let epoch_before = sim.epoch();
        match sim.step() {
            Ok(()) => {}
            Err(Error::Divergence { iteration, worker }) => {
                status = RunStatus::Diverged { iteration, worker };
                break;
            }
            Err(e) => return Err(e),
        }
        let boundary = sim.epoch() != epoch_before;
        let done = sim.iteration() == stop_at;
        if done || (boundary && sim.epoch() % spec.engine.eval_every == 0) {
            records.push(eval(&sim)?);
        }
    }
    Ok(RunOutcome {
        summary: RunSummary {
            status,
            dim: shape.dim(),
            spectral_gap: rho,
            delta,
            rounds_per_epoch: sim.rounds_per_epoch(),
            iterations: sim.iteration(),
            stopping_index,
        },
        records,
    })
}
