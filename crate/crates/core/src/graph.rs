//! Communication graphs, mixing matrices and spectral gap.
//!
//! Graphs are undirected and always carry an implicit self-loop on every
//! worker. Adjacency lists exclude the self-loop, so `degree` counts only
//! distinct neighbors.

use std::collections::{BTreeSet, VecDeque};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Tolerance on row/column sums of a mixing matrix.
pub const STOCHASTIC_TOL: f64 = 1e-12;

/// Relative residual at which power iteration stops.
pub const POWER_TOL: f64 = 1e-10;

pub const POWER_MAX_ITERS: usize = 100_000;

/// Attempts made by [`build_watts_strogatz`] before giving up on connectivity.
pub const WS_MAX_ATTEMPTS: u64 = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    Ring,
    Torus,
    WattsStrogatz,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    adjacency: Vec<Vec<usize>>,
}

impl Graph {
    /// Builds a graph from unordered edges. Self-loops in the input are
    /// ignored (they are implicit), duplicates are merged and the result
    /// must be connected.
    pub fn from_edges<I>(n_workers: usize, edges: I) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, usize)>,
    {
        if n_workers == 0 {
            return Err(Error::InvalidSize("graph needs at least one worker".into()));
        }
        let mut sets = vec![BTreeSet::new(); n_workers];
        for (a, b) in edges {
            if a >= n_workers || b >= n_workers {
                return Err(Error::InvalidSize(format!(
                    "edge ({a},{b}) out of range for {n_workers} workers"
                )));
            }
            if a != b {
                sets[a].insert(b);
                sets[b].insert(a);
            }
        }
        let graph = Graph {
            adjacency: sets.into_iter().map(|s| s.into_iter().collect()).collect(),
        };
        if !graph.is_connected() {
            return Err(Error::Construction("graph is not connected".into()));
        }
        Ok(graph)
    }

    pub fn n_workers(&self) -> usize {
        self.adjacency.len()
    }

    /// Neighbors of `i` in increasing order, self excluded.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.adjacency[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adjacency[i].len()
    }

    /// `true` for every self-loop and every listed edge.
    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        i == j || self.adjacency[i].binary_search(&j).is_ok()
    }

    /// Number of undirected edges, self-loops excluded.
    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// All unordered edges `(i, j)` with `i <= j`, self-loops included.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.n_workers() {
            out.push((i, i));
            out.extend(
                self.adjacency[i]
                    .iter()
                    .filter(|&&j| j > i)
                    .map(|&j| (i, j)),
            );
        }
        out
    }

    pub fn is_connected(&self) -> bool {
        connected(&self.adjacency)
    }
}

fn connected<A: AsRef<[usize]>>(adjacency: &[A]) -> bool {
    let n = adjacency.len();
    if n == 0 {
        return false;
    }
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([0usize]);
    seen[0] = true;
    let mut count = 1;
    while let Some(u) = queue.pop_front() {
        for &v in adjacency[u].as_ref() {
            if !seen[v] {
                seen[v] = true;
                count += 1;
                queue.push_back(v);
            }
        }
    }
    count == n
}

pub fn build_ring(n_workers: usize) -> Result<Graph> {
    if n_workers < 2 {
        return Err(Error::InvalidSize(format!(
            "ring needs at least 2 workers, got {n_workers}"
        )));
    }
    Graph::from_edges(n_workers, (0..n_workers).map(|i| (i, (i + 1) % n_workers)))
}

/// 2-D grid with wrap-around. Node `(r, c)` has id `r * cols + c`.
pub fn build_torus(rows: usize, cols: usize) -> Result<Graph> {
    if rows < 2 || cols < 2 {
        return Err(Error::InvalidSize(format!(
            "torus sides must be >= 2, got {rows}x{cols}"
        )));
    }
    let id = |r: usize, c: usize| r * cols + c;
    let mut edges = Vec::with_capacity(2 * rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            edges.push((id(r, c), id((r + 1) % rows, c)));
            edges.push((id(r, c), id(r, (c + 1) % cols)));
        }
    }
    Graph::from_edges(rows * cols, edges)
}

/// Watts–Strogatz small world: a ring lattice where each node links to its
/// `k_ring / 2` successors, after which every lattice edge `(u, u + j)` is
/// rewired to a uniformly chosen new endpoint with probability `beta`.
///
/// A disconnected outcome is regenerated with `seed + 1`, `seed + 2`, ...
pub fn build_watts_strogatz(
    n_workers: usize,
    k_ring: usize,
    beta: f64,
    seed: u64,
) -> Result<Graph> {
    if k_ring < 2 || !k_ring.is_multiple_of(2) || n_workers <= k_ring {
        return Err(Error::InvalidSize(format!(
            "watts-strogatz needs an even k_ring >= 2 below n_workers, got n={n_workers}, k={k_ring}"
        )));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::InvalidSize(format!(
            "rewiring probability {beta} not in [0,1]"
        )));
    }
    for attempt in 0..WS_MAX_ATTEMPTS {
        let adjacency = watts_strogatz_once(n_workers, k_ring, beta, seed.wrapping_add(attempt));
        if connected(&adjacency) {
            return Graph::from_edges(
                n_workers,
                adjacency
                    .iter()
                    .enumerate()
                    .flat_map(|(u, nb)| nb.iter().map(move |&v| (u, v))),
            );
        }
    }
    Err(Error::Construction(format!(
        "watts-strogatz graph still disconnected after {WS_MAX_ATTEMPTS} attempts"
    )))
}

fn watts_strogatz_once(n: usize, k_ring: usize, beta: f64, seed: u64) -> Vec<Vec<usize>> {
    let mut adj = vec![BTreeSet::new(); n];
    for j in 1..=k_ring / 2 {
        for u in 0..n {
            let v = (u + j) % n;
            adj[u].insert(v);
            adj[v].insert(u);
        }
    }
    let mut rng = rng::stream(seed);
    for j in 1..=k_ring / 2 {
        for u in 0..n {
            let v = (u + j) % n;
            if rng.random::<f64>() >= beta || adj[u].len() >= n - 1 {
                continue;
            }
            let w = loop {
                let w = rng.random_range(0..n);
                if w != u && !adj[u].contains(&w) {
                    break w;
                }
            };
            adj[u].remove(&v);
            adj[v].remove(&u);
            adj[u].insert(w);
            adj[w].insert(u);
        }
    }
    adj.into_iter().map(|s| s.into_iter().collect()).collect()
}

/// Dense symmetric doubly stochastic matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingMatrix {
    n: usize,
    weights: Vec<f64>,
}

impl MixingMatrix {
    /// Validates `weights` (row-major, `n * n`) against `graph`.
    pub fn new(graph: &Graph, weights: Vec<f64>) -> Result<Self> {
        let n = graph.n_workers();
        if weights.len() != n * n {
            return Err(Error::InvalidMixing(format!(
                "expected {} weights, got {}",
                n * n,
                weights.len()
            )));
        }
        let w = MixingMatrix { n, weights };
        w.validate(graph)?;
        Ok(w)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.weights[i * self.n..(i + 1) * self.n]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }

    pub fn validate(&self, graph: &Graph) -> Result<()> {
        let n = self.n;
        for i in 0..n {
            let mut row = 0.0;
            let mut col = 0.0;
            for j in 0..n {
                let wij = self.get(i, j);
                if !(wij >= 0.0) {
                    return Err(Error::InvalidMixing(format!(
                        "W[{i}][{j}] = {wij} is negative"
                    )));
                }
                if wij != self.get(j, i) {
                    return Err(Error::InvalidMixing(format!(
                        "W is not symmetric at ({i},{j})"
                    )));
                }
                if wij != 0.0 && !graph.has_edge(i, j) {
                    return Err(Error::InvalidMixing(format!(
                        "W[{i}][{j}] = {wij} but ({i},{j}) is not an edge"
                    )));
                }
                row += wij;
                col += self.get(j, i);
            }
            if (row - 1.0).abs() > STOCHASTIC_TOL || (col - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::InvalidMixing(format!(
                    "row/column {i} sums to {row}/{col}"
                )));
            }
        }
        Ok(())
    }
}

/// Metropolis–Hastings weights: `1 / (1 + max(deg_i, deg_j))` on every edge,
/// the remainder on the diagonal.
pub fn metropolis_weights(graph: &Graph) -> Result<MixingMatrix> {
    let n = graph.n_workers();
    let mut weights = vec![0.0; n * n];
    for i in 0..n {
        for &j in graph.neighbors(i) {
            weights[i * n + j] = 1.0 / (1.0 + graph.degree(i).max(graph.degree(j)) as f64);
        }
    }
    for i in 0..n {
        let off: f64 = graph.neighbors(i).iter().map(|&j| weights[i * n + j]).sum();
        weights[i * n + i] = 1.0 - off;
    }
    MixingMatrix::new(graph, weights)
}

/// `1 - ||W - 11ᵀ/N||₂`.
///
/// The largest singular value of the deflated matrix `A` is found by power
/// iteration on `AᵀA`, stopping once the eigen-residual drops below
/// [`POWER_TOL`] relative to the Rayleigh quotient.
pub fn spectral_gap(w: &MixingMatrix) -> Result<f64> {
    let n = w.n();
    let inv_n = 1.0 / n as f64;
    let a: Vec<f64> = w.as_slice().iter().map(|&x| x - inv_n).collect();
    let frob = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    if frob == 0.0 {
        return Ok(1.0);
    }

    // B = AᵀA, symmetric positive semi-definite.
    let mut b = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let s: f64 = (0..n).map(|k| a[k * n + i] * a[k * n + j]).sum();
            b[i * n + j] = s;
            b[j * n + i] = s;
        }
    }

    let mut rng = rng::stream(0x05ee_d9a9);
    let mut v: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
    normalize(&mut v);
    let mut u = vec![0.0; n];
    for _ in 0..POWER_MAX_ITERS {
        mat_vec(&b, &v, &mut u);
        let mu: f64 = v.iter().zip(&u).map(|(x, y)| x * y).sum();
        let norm_u = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        // Norms below this are rounding noise on a numerically zero deflation.
        if norm_u <= 1e-28 * frob * frob {
            return Ok(1.0);
        }
        let residual = v
            .iter()
            .zip(&u)
            .map(|(x, y)| (y - mu * x).powi(2))
            .sum::<f64>()
            .sqrt();
        if residual <= POWER_TOL * mu.abs() {
            let sigma = mu.max(0.0).sqrt();
            let rho = 1.0 - sigma;
            if !(rho > 0.0) {
                return Err(Error::Numerical(format!(
                    "spectral gap {rho} is not positive; is the graph connected?"
                )));
            }
            return Ok(rho.min(1.0));
        }
        v.iter_mut().zip(&u).for_each(|(x, y)| *x = y / norm_u);
    }
    Err(Error::Numerical(format!(
        "power iteration did not converge in {POWER_MAX_ITERS} iterations"
    )))
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
}

fn mat_vec(m: &[f64], v: &[f64], out: &mut [f64]) {
    let n = v.len();
    for (i, o) in out.iter_mut().enumerate() {
        *o = m[i * n..(i + 1) * n]
            .iter()
            .zip(v)
            .map(|(a, b)| a * b)
            .sum();
    }
}

/// Graph selection as read from configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphConfig {
    pub topology: Topology,
    pub n_workers: usize,
    /// Torus rows; defaults to the largest divisor of `n_workers` not above its square root.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub torus_rows: Option<usize>,
    /// Lattice degree for Watts–Strogatz; clamped to the largest even value below `n_workers`.
    #[serde(default = "default_ws_k")]
    pub ws_k: usize,
    #[serde(default = "default_ws_beta")]
    pub ws_beta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub graph_seed: Option<u64>,
}

fn default_ws_k() -> usize {
    4
}

fn default_ws_beta() -> f64 {
    0.2
}

impl GraphConfig {
    pub fn build(&self, seed: u64) -> Result<Graph> {
        match self.topology {
            Topology::Ring => build_ring(self.n_workers),
            Topology::Torus => {
                let rows = match self.torus_rows {
                    Some(r) => r,
                    None => default_torus_rows(self.n_workers),
                };
                if rows == 0 || !self.n_workers.is_multiple_of(rows) {
                    return Err(Error::InvalidSize(format!(
                        "torus_rows {rows} does not divide n_workers {}",
                        self.n_workers
                    )));
                }
                build_torus(rows, self.n_workers / rows)
            }
            Topology::WattsStrogatz => {
                let mut k = self.ws_k;
                if self.n_workers >= 3 && k >= self.n_workers {
                    k = (self.n_workers - 1) & !1;
                }
                build_watts_strogatz(self.n_workers, k, self.ws_beta, seed)
            }
        }
    }
}

fn default_torus_rows(n: usize) -> usize {
    (2..=n)
        .take_while(|r| r * r <= n)
        .filter(|r| n.is_multiple_of(*r))
        .last()
        .unwrap_or(0)
}
