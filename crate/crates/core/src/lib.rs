//! Deterministic simulation of compressed decentralized SGD.
//!
//! The crate simulates `N` workers connected by an undirected graph that
//! jointly train a two-layer ReLU network. Two algorithms are provided:
//! plain decentralized SGD (mix, then step) and CHOCO-SGD, which gossips
//! compressed differences against replicated auxiliary copies of every
//! neighbor's iterate.
//!
//! Module map:
//!
//! * [`graph`] builds ring, torus and Watts–Strogatz topologies, derives
//!   Metropolis mixing matrices and measures their spectral gap.
//! * [`compression`] implements the identity, `rand_k` and `top_k`
//!   sparsifiers and an empirical check of the relative-error contract.
//! * [`model`] is the network, its losses and exact hidden-layer gradients.
//! * [`data`] generates synthetic Gaussian-blob classification data and
//!   partitions it across workers.
//! * [`engine`] runs round-synchronous DSGD / CHOCO-SGD.
//! * [`metrics`] evaluates loss, accuracy, consensus distance and the
//!   theoretical iteration-complexity predictors.
//! * [`harness`] composes everything into sweepable experiments that write
//!   CSV/JSON result trees.

pub mod compression;
pub mod data;
pub mod engine;
pub mod error;
pub mod graph;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod rng;

pub use compression::{CompressorKind, CompressorSpec, SparseUpdate};
pub use data::{Dataset, Shard, Split};
pub use engine::{Algorithm, RunConfig, Simulation, StepSchedule, WorkerState};
pub use error::{Error, Result};
pub use graph::{Graph, MixingMatrix};
pub use metrics::{BoundInputs, MetricRecord, ProblemConstants};
pub use model::{LabeledBatch, LossKind, NetworkShape, ParamVector};
pub use rng::RngStream;
