//! Evaluation metrics and the iteration-complexity predictors.

use std::io::{Read, Write};

use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{self, LossKind, NetworkShape, ParamVector};
use crate::rng;

/// Snapshot taken at an evaluation barrier. `None` marks a metric that is
/// undefined for the current state (written as `NA`).
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub epoch: u64,
    pub iteration: u64,
    /// `J(θ̄)` on the full training set.
    pub train_loss_global: f64,
    pub test_acc_avg: Option<f64>,
    pub test_acc_local_mean: Option<f64>,
    pub consensus_distance: Option<f64>,
    /// `||∇J(θ̄)||²`, full batch.
    pub grad_norm_sq: f64,
    pub cumulative_bytes: u64,
    /// Mean over workers of `J(θ_i)` on the full training set.
    pub train_loss_local_mean: f64,
}

pub const CSV_COLUMNS: [&str; 9] = [
    "epoch",
    "iteration",
    "train_loss_global",
    "test_acc_avg",
    "test_acc_local_mean",
    "consensus_distance",
    "grad_norm_sq",
    "cumulative_bytes",
    "train_loss_local_mean",
];

const MISSING: &str = "NA";

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| MISSING.to_string(), |x| x.to_string())
}

fn parse_f64(s: &str) -> Result<f64> {
    s.parse()
        .map_err(|_| Error::Config(format!("bad number {s:?} in metrics CSV")))
}

fn parse_opt(s: &str) -> Result<Option<f64>> {
    if s == MISSING {
        Ok(None)
    } else {
        parse_f64(s).map(Some)
    }
}

fn parse_u64(s: &str) -> Result<u64> {
    s.parse()
        .map_err(|_| Error::Config(format!("bad integer {s:?} in metrics CSV")))
}

impl MetricRecord {
    pub fn to_row(&self) -> Vec<String> {
        vec![
            self.epoch.to_string(),
            self.iteration.to_string(),
            self.train_loss_global.to_string(),
            fmt_opt(self.test_acc_avg),
            fmt_opt(self.test_acc_local_mean),
            fmt_opt(self.consensus_distance),
            self.grad_norm_sq.to_string(),
            self.cumulative_bytes.to_string(),
            self.train_loss_local_mean.to_string(),
        ]
    }

    pub fn from_row(row: &csv::StringRecord) -> Result<Self> {
        if row.len() != CSV_COLUMNS.len() {
            return Err(Error::Config(format!(
                "metrics row has {} fields",
                row.len()
            )));
        }
        Ok(MetricRecord {
            epoch: parse_u64(&row[0])?,
            iteration: parse_u64(&row[1])?,
            train_loss_global: parse_f64(&row[2])?,
            test_acc_avg: parse_opt(&row[3])?,
            test_acc_local_mean: parse_opt(&row[4])?,
            consensus_distance: parse_opt(&row[5])?,
            grad_norm_sq: parse_f64(&row[6])?,
            cumulative_bytes: parse_u64(&row[7])?,
            train_loss_local_mean: parse_f64(&row[8])?,
        })
    }
}

pub fn write_metrics_csv<W: Write>(out: W, records: &[MetricRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_COLUMNS)?;
    for r in records {
        w.write_record(r.to_row())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv<R: Read>(input: R) -> Result<Vec<MetricRecord>> {
    let mut r = csv::Reader::from_reader(input);
    if r.headers()?.iter().ne(CSV_COLUMNS) {
        return Err(Error::Config(
            "metrics CSV header does not match the expected columns".into(),
        ));
    }
    r.records()
        .map(|rec| MetricRecord::from_row(&rec?))
        .collect()
}

/// `θ̄ = (1/N) Σ_i θ_i`.
pub fn network_average<T: AsRef<[f64]>>(thetas: &[T]) -> ParamVector {
    let dim = thetas.first().map_or(0, |t| t.as_ref().len());
    let mut avg = vec![0.0; dim];
    for t in thetas {
        avg.iter_mut().zip(t.as_ref()).for_each(|(a, v)| *a += v);
    }
    let n = thetas.len() as f64;
    avg.iter_mut().for_each(|a| *a /= n);
    ParamVector::from_vec(avg)
}

/// Normalized consensus distance `(1/N) Σ_i ||θ_i − θ̄||² / ||θ̄||²`;
/// `None` when `θ̄ = 0`.
pub fn consensus_distance<T: AsRef<[f64]>>(thetas: &[T]) -> Option<f64> {
    if thetas.is_empty() {
        return None;
    }
    let avg = network_average(thetas);
    let denom = avg.norm_sq();
    if denom == 0.0 {
        return None;
    }
    let spread: f64 = thetas
        .iter()
        .map(|t| {
            t.as_ref()
                .iter()
                .zip(avg.iter())
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
        })
        .sum();
    Some(spread / thetas.len() as f64 / denom)
}

/// Full evaluation of a set of local models.
#[allow(clippy::too_many_arguments)]
pub fn global_eval<T: AsRef<[f64]> + Sync>(
    shape: &NetworkShape,
    loss: LossKind,
    thetas: &[T],
    train: &Dataset,
    test: &Dataset,
    epoch: u64,
    iteration: u64,
    cumulative_bytes: u64,
) -> Result<MetricRecord> {
    let avg = network_average(thetas);
    let (train_loss_global, grad) = model::loss_and_grad(shape, &avg, &train.samples, loss)?;
    let test_acc_avg = model::accuracy(shape, &avg, &test.samples)?;
    let locals: Vec<(f64, Option<f64>)> = thetas
        .par_iter()
        .map(|t| {
            Ok((
                model::batch_loss(shape, t.as_ref(), &train.samples, loss)?,
                model::accuracy(shape, t.as_ref(), &test.samples)?,
            ))
        })
        .collect::<Result<_>>()?;
    let n = locals.len() as f64;
    let train_loss_local_mean = locals.iter().map(|l| l.0).sum::<f64>() / n;
    let test_acc_local_mean = locals
        .iter()
        .map(|l| l.1)
        .sum::<Option<f64>>()
        .map(|s| s / n);
    Ok(MetricRecord {
        epoch,
        iteration,
        train_loss_global,
        test_acc_avg,
        test_acc_local_mean,
        consensus_distance: consensus_distance(thetas),
        grad_norm_sq: grad.norm_sq(),
        cumulative_bytes,
        train_loss_local_mean,
    })
}

/// Problem constants entering the complexity bounds; the iteration count is
/// supplied separately.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ProblemConstants {
    /// Smoothness `L`.
    pub smoothness: f64,
    /// Gradient noise bound `σ`.
    pub sigma: f64,
    /// Second-moment bound `G`.
    pub second_moment: f64,
    /// Initial optimality gap `J(θ̄⁰) − min J`.
    pub initial_gap: f64,
    pub n_workers: usize,
    /// Spectral gap `ρ`.
    pub rho: f64,
    /// Compression parameter `δ`.
    pub delta: f64,
}

impl ProblemConstants {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            self.smoothness,
            self.sigma,
            self.second_moment,
            self.initial_gap,
        ];
        if nonneg.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "bound constants must be finite and non-negative: {self:?}"
            )));
        }
        if self.n_workers == 0 {
            return Err(Error::InvalidParameter("n_workers must be positive".into()));
        }
        for (name, v) in [("rho", self.rho), ("delta", self.delta)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::InvalidParameter(format!(
                    "{name} = {v} not in (0, 1]"
                )));
            }
        }
        Ok(())
    }

    /// Same constants with `δ = k/d`.
    pub fn with_sparsity(self, k: usize, dim: usize) -> Self {
        ProblemConstants {
            delta: k as f64 / dim as f64,
            ..self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BoundInputs {
    pub constants: ProblemConstants,
    pub iterations: u64,
}

/// The two terms of the stationarity bound, with unit constants:
/// `sqrt(L σ² J₀ / (N T))` and `(L G J₀ / (ρ² δ T))^(2/3)`.
pub fn theorem1_terms(b: &BoundInputs) -> (f64, f64) {
    let c = &b.constants;
    let t = b.iterations as f64;
    let noise =
        (c.smoothness * c.sigma * c.sigma * c.initial_gap / (c.n_workers as f64 * t)).sqrt();
    let consensus = (c.smoothness * c.second_moment * c.initial_gap
        / (c.rho * c.rho * c.delta * t))
        .powf(2.0 / 3.0);
    (noise, consensus)
}

/// Upper bound on `E||∇J(θ̄)||²` after `T` iterations, up to constants.
pub fn theorem1_bound(b: &BoundInputs) -> f64 {
    let (a, c) = theorem1_terms(b);
    a + c
}

/// Real-valued iteration count
/// `L J₀ · max{σ²/(N ε²), G/(δ ρ² ε^1.5)}` before rounding up.
pub fn pitfall_iterations_real(c: &ProblemConstants, epsilon: f64) -> f64 {
    let noise = c.sigma * c.sigma / (c.n_workers as f64 * epsilon * epsilon);
    let consensus = (1.0 / c.delta) * c.second_moment / (c.rho * c.rho * epsilon.powf(1.5));
    c.smoothness * c.initial_gap * noise.max(consensus)
}

/// Iterations needed for an `ε`-stationary point, up to constants.
pub fn pitfall_iterations(c: &ProblemConstants, epsilon: f64) -> Result<u64> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    c.validate()?;
    Ok(pitfall_iterations_real(c, epsilon).ceil() as u64)
}

/// An objective that can be probed for the empirical bound constants.
pub trait ProbeObjective {
    fn loss(&self, theta: &[f64]) -> Result<f64>;
    fn full_gradient(&self, theta: &[f64]) -> Result<Vec<f64>>;
    /// Independent minibatch gradients at `theta`; `point` indexes the probe.
    fn minibatch_gradients(&self, theta: &[f64], point: usize) -> Result<Vec<Vec<f64>>>;
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Empirical stand-ins for the assumption constants.
///
/// * `L`: largest `||∇J(a) − ∇J(b)|| / ||a − b||` over probe pairs.
/// * `σ²`: largest per-point spread of minibatch gradients around their mean.
/// * `G²`: largest per-point mean of `||g||²` over the same samples.
/// * `J₀`: loss at `probes[0]` (taken as `θ̄⁰`) minus the best loss seen.
pub fn estimate_bound_inputs<O: ProbeObjective>(
    objective: &O,
    probes: &[ParamVector],
    best_seen_loss: Option<f64>,
    n_workers: usize,
    iterations: u64,
    rho: f64,
    delta: f64,
) -> Result<BoundInputs> {
    if probes.len() < 2 {
        return Err(Error::InsufficientProbe(probes.len()));
    }
    let grads: Vec<Vec<f64>> = probes
        .iter()
        .map(|p| objective.full_gradient(p))
        .collect::<Result<_>>()?;
    let mut smoothness = 0.0f64;
    for a in 0..probes.len() {
        for b in a + 1..probes.len() {
            let dx = dist(&probes[a], &probes[b]);
            if dx > 0.0 {
                smoothness = smoothness.max(dist(&grads[a], &grads[b]) / dx);
            }
        }
    }

    let mut sigma_sq = 0.0f64;
    let mut second = 0.0f64;
    for (i, p) in probes.iter().enumerate() {
        let samples = objective.minibatch_gradients(p, i)?;
        if samples.is_empty() {
            continue;
        }
        let n = samples.len() as f64;
        let mean = network_average(&samples);
        let var = samples.iter().map(|g| dist(g, &mean).powi(2)).sum::<f64>() / n;
        let m2 = samples
            .iter()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            / n;
        sigma_sq = sigma_sq.max(var);
        second = second.max(m2);
    }

    let losses: Vec<f64> = probes
        .iter()
        .map(|p| objective.loss(p))
        .collect::<Result<_>>()?;
    let best = losses
        .iter()
        .copied()
        .chain(best_seen_loss)
        .fold(f64::INFINITY, f64::min);
    Ok(BoundInputs {
        constants: ProblemConstants {
            smoothness,
            sigma: sigma_sq.sqrt(),
            second_moment: second.sqrt(),
            initial_gap: (losses[0] - best).max(0.0),
            n_workers,
            rho,
            delta,
        },
        iterations,
    })
}

/// The network's training objective, probed with `samples` minibatches per point.
pub struct NetworkObjective<'a> {
    pub shape: &'a NetworkShape,
    pub loss: LossKind,
    pub train: &'a Dataset,
    pub batch_size: usize,
    pub samples: usize,
    pub seed: u64,
}

impl ProbeObjective for NetworkObjective<'_> {
    fn loss(&self, theta: &[f64]) -> Result<f64> {
        model::batch_loss(self.shape, theta, &self.train.samples, self.loss)
    }

    fn full_gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        Ok(model::grad_batch(self.shape, theta, &self.train.samples, self.loss)?.into_inner())
    }

    fn minibatch_gradients(&self, theta: &[f64], point: usize) -> Result<Vec<Vec<f64>>> {
        use rand::seq::index::sample;
        let n = self.train.len();
        let b = self.batch_size.min(n);
        let mut r = rng::derived_stream(self.seed, &[rng::tag::PROBE, point as u64]);
        (0..self.samples)
            .map(|_| {
                let rows = sample(&mut r, n, b).into_vec();
                Ok(
                    model::grad_batch(self.shape, theta, &self.train.gather(&rows), self.loss)?
                        .into_inner(),
                )
            })
            .collect()
    }
}
