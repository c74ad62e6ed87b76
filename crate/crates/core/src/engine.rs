//! Round-synchronous DSGD and CHOCO-SGD.
//!
//! A round reads only pre-round state: every gradient is evaluated at the
//! worker's iterate from the start of the round. CHOCO-SGD runs three
//! barrier-separated phases:
//!
//! 1. local step `θ_i ← θ_i − η g_i`;
//! 2. each worker compresses `q_i = Q(θ_i − θ̂_ii)`, adds it to its own
//!    copy `θ̂_ii`, and every neighbor `j` adds it to its copy `θ̂_ji`;
//! 3. `θ_i ← θ_i + γ Σ_{j∈N(i)} W_ij (θ̂_ij − θ̂_ii)`.
//!
//! Within a phase workers run in parallel on the ambient rayon pool. Each
//! worker's arithmetic is sequential and in a fixed order, so the result
//! is bit-identical for any thread count.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compression::{message_bytes, CompressorSpec, SparseUpdate, DENSE_ENTRY_BYTES};
use crate::data::{epoch_batch_indices, Dataset, Shard};
use crate::error::{Error, Result};
use crate::graph::{Graph, MixingMatrix};
use crate::model::{loss_and_grad, LabeledBatch, LossKind, NetworkShape, ParamVector};
use crate::rng::{self, tag, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Dsgd,
    Choco,
}

/// Piecewise-constant step size: `base_eta / decay_factor^(milestones passed)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub base_eta: f64,
    pub decay_factor: f64,
    pub milestones: Vec<u64>,
}

impl StepSchedule {
    pub fn constant(eta: f64) -> Self {
        StepSchedule {
            base_eta: eta,
            decay_factor: 1.0,
            milestones: vec![],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_eta > 0.0) || !self.base_eta.is_finite() {
            return Err(Error::Config(format!(
                "eta must be positive, got {}",
                self.base_eta
            )));
        }
        if !(self.decay_factor > 0.0) || !self.decay_factor.is_finite() {
            return Err(Error::Config(format!(
                "decay_factor must be positive, got {}",
                self.decay_factor
            )));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "decay_milestones must be strictly increasing".into(),
            ));
        }
        Ok(())
    }

    pub fn eta_at(&self, epoch: u64) -> f64 {
        eta_at(self, epoch)
    }
}

pub fn eta_at(schedule: &StepSchedule, epoch: u64) -> f64 {
    let passed = schedule.milestones.iter().filter(|&&m| m <= epoch).count();
    schedule.base_eta / schedule.decay_factor.powi(passed as i32)
}

/// Uniform draw from `{0, ..., t_max}`.
pub fn draw_stopping_index<R: Rng + ?Sized>(t_max: u64, rng: &mut R) -> u64 {
    rng.random_range(0..=t_max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    pub gamma: f64,
    pub schedule: StepSchedule,
    pub compressor: CompressorSpec,
    pub epochs: u64,
    pub batch_size: usize,
    pub loss: LossKind,
    pub draw_stopping_index: bool,
}

impl RunConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!(
                "gamma must lie in (0, 1], got {}",
                self.gamma
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        self.schedule.validate()?;
        self.compressor
            .validate(dim)
            .map_err(|e| Error::Config(format!("compressor: {e}")))
    }
}

/// One worker's private state. `hat_neighbors[j]` is this worker's replica
/// of neighbor `j`'s auxiliary variable; `hat_self` is its own.
#[derive(Debug, Clone)]
pub struct WorkerState {
    pub id: usize,
    pub theta: ParamVector,
    pub hat_self: ParamVector,
    pub hat_neighbors: BTreeMap<usize, ParamVector>,
    pub shard: Shard,
    pub rng: RngStream,
}

impl WorkerState {
    pub fn new(
        id: usize,
        theta: ParamVector,
        neighbors: &[usize],
        shard: Shard,
        rng: RngStream,
    ) -> Self {
        let dim = theta.len();
        WorkerState {
            id,
            hat_self: ParamVector::zeros(dim),
            hat_neighbors: neighbors
                .iter()
                .filter(|&&j| j != id)
                .map(|&j| (j, ParamVector::zeros(dim)))
                .collect(),
            theta,
            shard,
            rng,
        }
    }

    pub fn neighbors(&self) -> impl Iterator<Item = usize> + '_ {
        self.hat_neighbors.keys().copied()
    }
}

/// Workers sharing the initial point `theta0`, each with its own stream
/// derived from `run_seed` and its id.
pub fn init_workers(
    graph: &Graph,
    theta0: &ParamVector,
    shards: Vec<Shard>,
    run_seed: u64,
) -> Result<Vec<WorkerState>> {
    if shards.len() != graph.n_workers() {
        return Err(Error::InvalidPartition(format!(
            "{} shards for {} workers",
            shards.len(),
            graph.n_workers()
        )));
    }
    Ok(shards
        .into_iter()
        .enumerate()
        .map(|(i, shard)| {
            WorkerState::new(
                i,
                theta0.clone(),
                graph.neighbors(i),
                shard,
                rng::derived_stream(run_seed, &[tag::WORKER, i as u64]),
            )
        })
        .collect())
}

fn check_finite(states: &[WorkerState], iteration: u64) -> Result<()> {
    match states.iter().find(|s| !s.theta.is_finite()) {
        Some(s) => Err(Error::Divergence {
            iteration,
            worker: s.id,
        }),
        None => Ok(()),
    }
}

fn check_network(states: &[WorkerState], w: &MixingMatrix) -> Result<()> {
    if states.len() != w.n() {
        return Err(Error::Shape(format!(
            "{} workers but W is {}x{}",
            states.len(),
            w.n(),
            w.n()
        )));
    }
    Ok(())
}

/// One DSGD round: `θ_i ← Σ_j W_ij θ_j − η g_i`, with `g_i` taken at the
/// pre-round iterate. Returns the bytes sent (dense models to every neighbor).
pub fn dsgd_round<G>(
    states: &mut [WorkerState],
    w: &MixingMatrix,
    eta: f64,
    iteration: u64,
    grad: G,
) -> Result<u64>
where
    G: Fn(usize, &[f64]) -> Result<ParamVector> + Sync,
{
    check_network(states, w)?;
    let grads: Vec<ParamVector> = states
        .par_iter()
        .map(|s| grad(s.id, &s.theta))
        .collect::<Result<_>>()?;
    let old: Vec<ParamVector> = states.iter().map(|s| s.theta.clone()).collect();
    states.par_iter_mut().for_each(|s| {
        let i = s.id;
        let row = w.row(i);
        let mut members: Vec<usize> = s.neighbors().collect();
        members.push(i);
        members.sort_unstable();
        for (k, t) in s.theta.iter_mut().enumerate() {
            let mixed: f64 = members.iter().map(|&j| row[j] * old[j][k]).sum();
            *t = mixed - eta * grads[i][k];
        }
    });
    check_finite(states, iteration)?;
    let dim = states.first().map_or(0, |s| s.theta.len()) as u64;
    Ok(states
        .iter()
        .map(|s| s.hat_neighbors.len() as u64 * dim * DENSE_ENTRY_BYTES)
        .sum())
}

/// One CHOCO-SGD round. Returns each worker's broadcast message, indexed by
/// sender id.
pub fn choco_round<G>(
    states: &mut [WorkerState],
    w: &MixingMatrix,
    eta: f64,
    gamma: f64,
    compressor: &CompressorSpec,
    iteration: u64,
    grad: G,
) -> Result<Vec<SparseUpdate>>
where
    G: Fn(usize, &[f64]) -> Result<ParamVector> + Sync,
{
    check_network(states, w)?;

    // Phase 1: local SGD step.
    states.par_iter_mut().try_for_each(|s| -> Result<()> {
        let g = grad(s.id, &s.theta)?;
        s.theta
            .iter_mut()
            .zip(g.iter())
            .for_each(|(t, gv)| *t -= eta * gv);
        Ok(())
    })?;
    check_finite(states, iteration)?;

    // Phase 2: compress against the own replica, then deliver at the barrier.
    let messages: Vec<SparseUpdate> = states
        .par_iter_mut()
        .map(|s| {
            let diff: Vec<f64> = s
                .theta
                .iter()
                .zip(s.hat_self.iter())
                .map(|(t, h)| t - h)
                .collect();
            let q = compressor.compress(&diff, &mut s.rng)?;
            q.add_to(&mut s.hat_self);
            Ok(q)
        })
        .collect::<Result<_>>()?;
    states.par_iter_mut().for_each(|s| {
        for (&j, hat) in s.hat_neighbors.iter_mut() {
            messages[j].add_to(hat);
        }
    });

    // Phase 3: consensus correction.
    states.par_iter_mut().for_each(|s| {
        let row = w.row(s.id);
        let mut acc = vec![0.0; s.theta.len()];
        for (&j, hat) in &s.hat_neighbors {
            let wij = row[j];
            for ((a, hj), hi) in acc.iter_mut().zip(hat.iter()).zip(s.hat_self.iter()) {
                *a += wij * (hj - hi);
            }
        }
        s.theta
            .iter_mut()
            .zip(&acc)
            .for_each(|(t, a)| *t += gamma * a);
    });
    check_finite(states, iteration)?;
    Ok(messages)
}

/// Bytes a set of broadcast messages puts on the wire: each worker's
/// message is sent once to every neighbor.
pub fn broadcast_bytes(states: &[WorkerState], messages: &[SparseUpdate]) -> u64 {
    states
        .iter()
        .map(|s| s.hat_neighbors.len() as u64 * message_bytes(&messages[s.id]))
        .sum()
}

/// A full training run over a fixed network, dataset and shards.
///
/// An epoch lasts as many rounds as the largest shard has batches; a worker
/// whose shard yields fewer batches cycles through its epoch's batches.
pub struct Simulation<'a> {
    config: RunConfig,
    shape: &'a NetworkShape,
    train: &'a Dataset,
    mixing: MixingMatrix,
    workers: Vec<WorkerState>,
    shuffle_seed: u64,
    iteration: u64,
    epoch: u64,
    round_in_epoch: usize,
    rounds_per_epoch: usize,
    plans: Vec<Vec<Vec<usize>>>,
    cumulative_bytes: u64,
}

impl<'a> Simulation<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        config: RunConfig,
        shape: &'a NetworkShape,
        train: &'a Dataset,
        graph: &Graph,
        mixing: MixingMatrix,
        shards: Vec<Shard>,
        theta0: &ParamVector,
        run_seed: u64,
    ) -> Result<Self> {
        config.validate(shape.dim())?;
        mixing.validate(graph)?;
        if theta0.len() != shape.dim() {
            return Err(Error::Shape(format!(
                "theta0 has length {}, expected {}",
                theta0.len(),
                shape.dim()
            )));
        }
        let workers = init_workers(graph, theta0, shards, run_seed)?;
        let rounds_per_epoch = workers
            .iter()
            .map(|w| w.shard.len().div_ceil(config.batch_size))
            .max()
            .unwrap_or(0)
            .max(1);
        let mut sim = Simulation {
            config,
            shape,
            train,
            mixing,
            workers,
            shuffle_seed: rng::derive_seed(run_seed, &[tag::SHUFFLE]),
            iteration: 0,
            epoch: 0,
            round_in_epoch: 0,
            rounds_per_epoch,
            plans: vec![],
            cumulative_bytes: 0,
        };
        sim.plan_epoch()?;
        Ok(sim)
    }

    fn plan_epoch(&mut self) -> Result<()> {
        self.plans = self
            .workers
            .iter()
            .map(|w| {
                epoch_batch_indices(
                    &w.shard,
                    self.config.batch_size,
                    self.epoch,
                    self.shuffle_seed,
                )
            })
            .collect::<Result<_>>()?;
        Ok(())
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn workers(&self) -> &[WorkerState] {
        &self.workers
    }

    pub fn workers_mut(&mut self) -> &mut [WorkerState] {
        &mut self.workers
    }

    pub fn thetas(&self) -> Vec<&[f64]> {
        self.workers.iter().map(|w| &w.theta[..]).collect()
    }

    pub fn mixing(&self) -> &MixingMatrix {
        &self.mixing
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn rounds_per_epoch(&self) -> usize {
        self.rounds_per_epoch
    }

    pub fn cumulative_bytes(&self) -> u64 {
        self.cumulative_bytes
    }

    /// Sets every replica `θ̂_ij` to the current `θ_j`.
    pub fn warm_hats(&mut self) {
        let thetas: Vec<ParamVector> = self.workers.iter().map(|w| w.theta.clone()).collect();
        for w in &mut self.workers {
            w.hat_self = thetas[w.id].clone();
            for (&j, hat) in w.hat_neighbors.iter_mut() {
                *hat = thetas[j].clone();
            }
        }
    }

    /// Minibatches every worker uses in the next round.
    pub fn next_batches(&self) -> Vec<LabeledBatch> {
        self.plans
            .iter()
            .map(|plan| match plan.len() {
                0 => self.train.gather(&[]),
                n => self.train.gather(&plan[self.round_in_epoch % n]),
            })
            .collect()
    }

    /// Runs one round with the current epoch's step size.
    pub fn step(&mut self) -> Result<()> {
        let eta = self.config.schedule.eta_at(self.epoch);
        let batches = self.next_batches();
        let shape = self.shape;
        let loss = self.config.loss;
        let grad = |i: usize, theta: &[f64]| -> Result<ParamVector> {
            if batches[i].is_empty() {
                return Ok(ParamVector::zeros(theta.len()));
            }
            loss_and_grad(shape, theta, &batches[i], loss).map(|(_, g)| g)
        };
        let bytes = match self.config.algorithm {
            Algorithm::Dsgd => {
                dsgd_round(&mut self.workers, &self.mixing, eta, self.iteration, grad)?
            }
            Algorithm::Choco => {
                let messages = choco_round(
                    &mut self.workers,
                    &self.mixing,
                    eta,
                    self.config.gamma,
                    &self.config.compressor,
                    self.iteration,
                    grad,
                )?;
                broadcast_bytes(&self.workers, &messages)
            }
        };
        self.cumulative_bytes += bytes;
        self.iteration += 1;
        self.round_in_epoch += 1;
        if self.round_in_epoch == self.rounds_per_epoch {
            self.round_in_epoch = 0;
            self.epoch += 1;
            self.plan_epoch()?;
        }
        Ok(())
    }

    /// Runs rounds until the next epoch boundary.
    pub fn run_epoch(&mut self) -> Result<()> {
        let target = self.epoch + 1;
        while self.epoch < target {
            self.step()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    pub algorithm: Algorithm,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    pub eta: f64,
    #[serde(default)]
    pub decay_milestones: Vec<u64>,
    #[serde(default = "default_decay_factor")]
    pub decay_factor: f64,
    pub epochs: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_seed: Option<u64>,
    #[serde(default)]
    pub draw_stopping_index: bool,
    /// Evaluate metrics every this many epochs (the final epoch is always evaluated).
    #[serde(default = "default_eval_every")]
    pub eval_every: u64,
}

fn default_gamma() -> f64 {
    0.0375
}

fn default_decay_factor() -> f64 {
    10.0
}

fn default_eval_every() -> u64 {
    1
}

impl EngineConfig {
    pub fn schedule(&self) -> StepSchedule {
        StepSchedule {
            base_eta: self.eta,
            decay_factor: self.decay_factor,
            milestones: self.decay_milestones.clone(),
        }
    }
}
