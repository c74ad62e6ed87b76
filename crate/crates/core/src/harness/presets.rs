//! Built-in desk-scale experiments.
//!
//! All presets use synthetic Gaussian blobs with 16 features and run in
//! minutes on a laptop. Absolute losses are not comparable to image-scale
//! training; the presets are sized to expose trends.

use super::config::ExperimentSpec;
use crate::error::{Error, Result};

const WIDTH_SWEEP: &str = r#"
name = "width_sweep"
trials = 5
master_seed = 2024

[graph]
topology = "ring"
n_workers = 8

[compression]
compressor = "top_k"
k = 20

[model]
width = 64
input_dim = 16
n_classes = 8
loss = "cross_entropy"
init_scale = 0.25

[data]
n_per_class = 250
class_sep = 1.5
batch_size = 8
partition = "iid"

[engine]
algorithm = "choco"
gamma = 0.04
eta = 1.0
decay_milestones = [20, 30]
decay_factor = 10.0
epochs = 40

[sweep]
"model.width" = [32, 64, 128, 256]
"#;

// Width stays fixed here: much wider networks with k = 5 lose stability at
// this γ and their consensus distance keeps growing.
const CONSENSUS_STUDY: &str = r#"
name = "consensus_study"
trials = 5
master_seed = 2025

[graph]
topology = "ring"
n_workers = 8

[compression]
compressor = "top_k"
k = 20

[model]
width = 128
input_dim = 16
n_classes = 8
loss = "cross_entropy"
init_scale = 0.25

[data]
n_per_class = 250
class_sep = 1.5
batch_size = 8
partition = "iid"

[engine]
algorithm = "choco"
gamma = 0.04
eta = 1.0
decay_milestones = [10, 20]
decay_factor = 10.0
epochs = 40

[sweep]
"compression.k" = [5, 20, 80]
"#;

const TOPOLOGY_SWEEP: &str = r#"
name = "topology_sweep"
trials = 5
master_seed = 2026

[graph]
topology = "ring"
n_workers = 8
ws_k = 4
ws_beta = 0.2

[compression]
compressor = "top_k"
k = 20

[model]
width = 64
input_dim = 16
n_classes = 8
loss = "cross_entropy"
init_scale = 0.25

[data]
n_per_class = 250
class_sep = 1.5
batch_size = 8
partition = "iid"

[engine]
algorithm = "choco"
gamma = 0.04
eta = 1.0
decay_milestones = [20, 30]
decay_factor = 10.0
epochs = 40

[sweep]
"graph.n_workers" = [4, 8, 16]
"graph.topology" = ["ring", "torus", "watts_strogatz"]
"#;

const HETERO_STUDY: &str = r#"
name = "hetero_study"
trials = 5
master_seed = 2027

[graph]
topology = "ring"
n_workers = 8

[compression]
compressor = "top_k"
k = 20

[model]
width = 64
input_dim = 16
n_classes = 8
loss = "cross_entropy"
init_scale = 0.25

[data]
n_per_class = 250
class_sep = 1.5
batch_size = 8
partition = "by_class"

[engine]
algorithm = "choco"
gamma = 0.04
eta = 1.0
decay_milestones = [20, 30]
decay_factor = 10.0
epochs = 40

[sweep]
"model.width" = [32, 64, 128, 256]
"#;

const PRESETS: [(&str, &str, &str); 4] = [
    (
        "width_sweep",
        "top_k with fixed k across widths: loss vs communicated bytes",
        WIDTH_SWEEP,
    ),
    (
        "consensus_study",
        "consensus distance across k at a fixed width",
        CONSENSUS_STUDY,
    ),
    (
        "topology_sweep",
        "final loss vs number of workers for ring, torus and small-world graphs",
        TOPOLOGY_SWEEP,
    ),
    (
        "hetero_study",
        "single-class shards: local-model vs averaged-model loss",
        HETERO_STUDY,
    ),
];

/// `(name, description)` of every preset.
pub fn list() -> Vec<(&'static str, &'static str)> {
    PRESETS.iter().map(|(n, d, _)| (*n, *d)).collect()
}

/// TOML source of a preset, usable as a starting point for custom specs.
pub fn source(name: &str) -> Option<&'static str> {
    PRESETS
        .iter()
        .find(|(n, _, _)| *n == name)
        .map(|(_, _, s)| s.trim_start())
}

pub fn preset(name: &str) -> Result<ExperimentSpec> {
    let src = source(name).ok_or_else(|| {
        let known: Vec<&str> = PRESETS.iter().map(|p| p.0).collect();
        Error::Config(format!(
            "unknown preset {name:?}; known: {}",
            known.join(", ")
        ))
    })?;
    ExperimentSpec::from_toml_str(src)
}

pub fn builtin_experiments() -> Vec<ExperimentSpec> {
    PRESETS
        .iter()
        .map(|(_, _, src)| ExperimentSpec::from_toml_str(src).expect("built-in presets parse"))
        .collect()
}
