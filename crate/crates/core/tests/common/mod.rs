#![allow(dead_code)]

use chocosim::compression::CompressorSpec;
use chocosim::data::Shard;
use chocosim::engine::{choco_round, WorkerState};
use chocosim::graph::{build_ring, Graph, MixingMatrix};
use chocosim::model::{self, LabeledBatch, LossKind, NetworkShape};
use chocosim::rng;
use chocosim::ParamVector;
use nalgebra::DMatrix;

/// `1 - max |λ|` of `W - 11ᵀ/N`, from a dense symmetric eigensolver.
pub fn eigen_rho(w: &MixingMatrix) -> f64 {
    let n = w.n();
    let a = DMatrix::from_fn(n, n, |i, j| w.get(i, j) - 1.0 / n as f64);
    let eig = a.symmetric_eigen();
    1.0 - eig.eigenvalues.iter().fold(0.0f64, |m, l| m.max(l.abs()))
}

/// Spectral gap of the ring with all weights 1/3, from the circulant
/// eigenvalues `1/3 + 2/3 cos(2πk/N)`.
pub fn ring_rho_closed_form(n: usize) -> f64 {
    let worst = (1..n)
        .map(|k| {
            let angle = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
            (1.0 / 3.0 + 2.0 / 3.0 * angle.cos()).abs()
        })
        .fold(0.0f64, f64::max);
    1.0 - worst
}

/// All `k`-subsets of `0..d` in lexicographic order.
pub fn subsets(d: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, d: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..d {
            if d - i < k - cur.len() {
                break;
            }
            cur.push(i);
            rec(i + 1, d, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, d, k, &mut Vec::new(), &mut out);
    out
}

/// `E ||rand_k(x) - x||²` by enumerating every subset the sampler can pick.
pub fn rand_k_expected_residual(x: &[f64], k: usize) -> f64 {
    let subs = subsets(x.len(), k);
    let total: f64 = subs
        .iter()
        .map(|s| {
            x.iter()
                .enumerate()
                .filter(|(i, _)| !s.contains(i))
                .map(|(_, v)| v * v)
                .sum::<f64>()
        })
        .sum();
    total / subs.len() as f64
}

pub struct FdReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
}

/// Compares `grad_batch` against central differences of `batch_loss`.
///
/// A hidden unit is skipped when some sample's pre-activation is within
/// reach of the kink under a step of `h`. The error of a coordinate is
/// `|g - fd| / max(|g|, |fd|, 1e-4)`.
pub fn finite_difference_check(
    shape: &NetworkShape,
    theta: &[f64],
    batch: &LabeledBatch,
    kind: LossKind,
    h: f64,
) -> FdReport {
    let f = shape.input_dim();
    let g = model::grad_batch(shape, theta, batch, kind).unwrap();
    let mut report = FdReport {
        max_rel_err: 0.0,
        checked: 0,
        skipped: 0,
    };
    let mut probe = theta.to_vec();
    for j in 0..shape.width() {
        let block = &theta[j * f..(j + 1) * f];
        let near_kink = (0..batch.len()).any(|s| {
            let x = batch.row(s);
            let pre: f64 = block.iter().zip(x).map(|(a, b)| a * b).sum();
            let reach = 2.0 * h * x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            pre.abs() < reach.max(1e-7)
        });
        if near_kink {
            report.skipped += f;
            continue;
        }
        for c in j * f..(j + 1) * f {
            probe[c] = theta[c] + h;
            let up = model::batch_loss(shape, &probe, batch, kind).unwrap();
            probe[c] = theta[c] - h;
            let down = model::batch_loss(shape, &probe, batch, kind).unwrap();
            probe[c] = theta[c];
            let fd = (up - down) / (2.0 * h);
            let scale = g[c].abs().max(fd.abs()).max(1e-4);
            report.max_rel_err = report.max_rel_err.max((g[c] - fd).abs() / scale);
            report.checked += 1;
        }
    }
    report
}

/// `θ̂_{j,i}` held by every neighbor `j` equals `θ̂_{i,i}` bit for bit.
pub fn hats_replicated(states: &[WorkerState]) -> bool {
    states.iter().all(|s| {
        s.hat_neighbors.iter().all(|(&j, hat)| {
            let own = &states[j].hat_self;
            hat.iter()
                .zip(own.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
        })
    })
}

pub fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

/// A three-worker instance on which CHOCO-SGD with the identity compressor
/// and `γ = 1` reduces exactly, in floating point, to mixing after the
/// local step: every weight, step size and feature is a small power of two,
/// so no operation rounds.
pub struct DyadicInstance {
    pub graph: Graph,
    pub w: MixingMatrix,
    pub shape: NetworkShape,
    pub eta: f64,
    pub theta0: Vec<Vec<f64>>,
}

pub const DYADIC_DIM: usize = 6;

impl DyadicInstance {
    pub fn new() -> Self {
        let graph = build_ring(3).unwrap();
        #[rustfmt::skip]
        let weights = vec![
            0.5, 0.25, 0.25,
            0.25, 0.5, 0.25,
            0.25, 0.25, 0.5,
        ];
        let w = MixingMatrix::new(&graph, weights).unwrap();
        let shape = NetworkShape::with_signs(DYADIC_DIM, 1, 1, vec![1.0]).unwrap();
        let theta0 = (0..3)
            .map(|i| {
                (0..DYADIC_DIM)
                    .map(|k| ((i * 7 + k * 3) % 9) as f64 / 4.0 - 0.5)
                    .collect()
            })
            .collect();
        DyadicInstance {
            graph,
            w,
            shape,
            eta: 0.5,
            theta0,
        }
    }

    /// Worker `i`'s single-sample batch in round `t`: two ±1 features.
    pub fn sample(i: usize, t: u64) -> Vec<f64> {
        let t = t as usize;
        let a = (i + t) % DYADIC_DIM;
        let mut b = (i + 2 * t + 1) % DYADIC_DIM;
        if b == a {
            b = (a + 1) % DYADIC_DIM;
        }
        let mut x = vec![0.0; DYADIC_DIM];
        x[a] = 1.0;
        x[b] = if t.is_multiple_of(2) { 1.0 } else { -1.0 };
        x
    }

    pub fn batch(i: usize, t: u64) -> LabeledBatch {
        LabeledBatch::new(DYADIC_DIM, Self::sample(i, t), vec![0]).unwrap()
    }

    /// Independent gradient of `½(relu(⟨x,θ⟩) - 1)²`.
    pub fn oracle_grad(theta: &[f64], x: &[f64]) -> Vec<f64> {
        let pre: f64 = theta.iter().zip(x).map(|(a, b)| a * b).sum();
        if pre > 0.0 {
            x.iter().map(|v| (pre - 1.0) * v).collect()
        } else {
            vec![0.0; x.len()]
        }
    }

    /// Dense recursion `θ_i ← Σ_j W_ij (θ_j - η g_j)`.
    pub fn oracle_trajectory(&self, rounds: u64) -> Vec<Vec<Vec<f64>>> {
        let n = self.theta0.len();
        let mut theta = self.theta0.clone();
        let mut out = Vec::new();
        for t in 0..rounds {
            let half: Vec<Vec<f64>> = (0..n)
                .map(|j| {
                    let g = Self::oracle_grad(&theta[j], &Self::sample(j, t));
                    theta[j]
                        .iter()
                        .zip(&g)
                        .map(|(a, b)| a - self.eta * b)
                        .collect()
                })
                .collect();
            theta = (0..n)
                .map(|i| {
                    (0..DYADIC_DIM)
                        .map(|k| (0..n).map(|j| self.w.get(i, j) * half[j][k]).sum())
                        .collect()
                })
                .collect();
            out.push(theta.clone());
        }
        out
    }

    /// Workers whose replicas already hold the current models.
    pub fn warm_workers(&self) -> Vec<WorkerState> {
        (0..3)
            .map(|i| {
                let mut s = WorkerState::new(
                    i,
                    ParamVector::from_vec(self.theta0[i].clone()),
                    self.graph.neighbors(i),
                    Shard {
                        owner: i,
                        indices: vec![],
                    },
                    rng::stream(i as u64),
                );
                s.hat_self = ParamVector::from_vec(self.theta0[i].clone());
                for (&j, hat) in s.hat_neighbors.iter_mut() {
                    *hat = ParamVector::from_vec(self.theta0[j].clone());
                }
                s
            })
            .collect()
    }

    /// CHOCO-SGD iterates through the engine.
    pub fn choco_trajectory(&self, rounds: u64) -> Vec<Vec<Vec<f64>>> {
        let mut states = self.warm_workers();
        let shape = &self.shape;
        let mut out = Vec::new();
        for t in 0..rounds {
            choco_round(
                &mut states,
                &self.w,
                self.eta,
                1.0,
                &CompressorSpec::identity(),
                t,
                |i, th| model::grad_batch(shape, th, &Self::batch(i, t), LossKind::Quadratic),
            )
            .unwrap();
            out.push(states.iter().map(|s| s.theta.to_vec()).collect());
        }
        out
    }
}
