//! Experiment configuration files.
//!
//! A spec is a TOML document with one table per subsystem and an optional
//! `[sweep]` table mapping `section.key` paths to lists of values:
//!
//! ```toml
//! name = "width_sweep"
//! trials = 5
//! master_seed = 1
//!
//! [graph]
//! topology = "ring"      # ring | torus | watts_strogatz
//! n_workers = 8
//!
//! [compression]
//! compressor = "top_k"   # identity | rand_k | top_k
//! k = 20
//!
//! [model]
//! width = 64
//! input_dim = 16
//! n_classes = 8
//!
//! [data]
//! n_per_class = 200
//! class_sep = 2.0
//! batch_size = 32
//!
//! [engine]
//! algorithm = "choco"    # choco | dsgd
//! eta = 0.1
//! epochs = 30
//!
//! [sweep]
//! "model.width" = [32, 64, 128, 256]
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::compression::CompressorSpec;
use crate::data::{DataConfig, Partition};
use crate::engine::{EngineConfig, RunConfig};
use crate::error::{Error, Result};
use crate::graph::GraphConfig;
use crate::model::ModelConfig;

/// Settings of a single run (one cell of a sweep).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub graph: GraphConfig,
    pub compression: CompressorSpec,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub engine: EngineConfig,
}

impl RunSpec {
    pub fn run_config(&self) -> RunConfig {
        RunConfig {
            algorithm: self.engine.algorithm,
            gamma: self.engine.gamma,
            schedule: self.engine.schedule(),
            compressor: self.compression,
            epochs: self.engine.epochs,
            batch_size: self.data.batch_size,
            loss: self.model.loss,
            draw_stopping_index: self.engine.draw_stopping_index,
        }
    }

    pub fn dim(&self) -> usize {
        self.model.width * self.model.input_dim
    }

    /// Checks everything that can be checked without training.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let m = &self.model;
        if m.width == 0 || m.input_dim == 0 || m.n_classes == 0 {
            return bad("model.width, model.input_dim and model.n_classes must be positive".into());
        }
        if !(m.init_scale > 0.0) || !m.init_scale.is_finite() {
            return bad(format!(
                "model.init_scale must be positive, got {}",
                m.init_scale
            ));
        }
        let d = &self.data;
        if d.n_per_class < 2 {
            return bad(format!(
                "data.n_per_class must be >= 2, got {}",
                d.n_per_class
            ));
        }
        if !(d.class_sep >= 0.0) || !d.class_sep.is_finite() {
            return bad(format!(
                "data.class_sep must be non-negative, got {}",
                d.class_sep
            ));
        }
        let n = self.graph.n_workers;
        match d.partition {
            Partition::ByClass if m.n_classes < n => {
                return bad(format!(
                    "by_class partition needs n_classes >= n_workers ({} < {n})",
                    m.n_classes
                ));
            }
            Partition::Iid if train_size(d.n_per_class) * m.n_classes < n => {
                return bad(format!("too few training samples for {n} workers"));
            }
            _ => {}
        }
        if self.engine.eval_every == 0 {
            return bad("engine.eval_every must be >= 1".into());
        }
        self.run_config().validate(self.dim())?;
        self.graph
            .build(self.graph.graph_seed.unwrap_or(0))
            .map_err(|e| Error::Config(format!("graph: {e}")))?;
        Ok(())
    }
}

/// Training rows per class produced by the blob generator.
pub(crate) fn train_size(n_per_class: usize) -> usize {
    ((n_per_class * 4) / 5).clamp(1, n_per_class.saturating_sub(1).max(1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub master_seed: u64,
    pub graph: GraphConfig,
    pub compression: CompressorSpec,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub engine: EngineConfig,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub sweep: BTreeMap<String, Vec<toml::Value>>,
}

fn default_trials() -> usize {
    1
}

/// One point of the sweep grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub index: usize,
    /// `(path, value)` for every swept parameter, in sweep-key order.
    pub labels: Vec<(String, String)>,
    pub spec: RunSpec,
}

pub fn value_label(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

impl ExperimentSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn base(&self) -> RunSpec {
        RunSpec {
            graph: self.graph.clone(),
            compression: self.compression,
            model: self.model.clone(),
            data: self.data.clone(),
            engine: self.engine.clone(),
        }
    }

    /// Cartesian product of the sweep, first sweep key outermost.
    pub fn cells(&self) -> Result<Vec<Cell>> {
        let base = toml::Value::try_from(self.base()).map_err(|e| Error::Config(e.to_string()))?;
        let keys: Vec<&String> = self.sweep.keys().collect();
        for k in &keys {
            if self.sweep[*k].is_empty() {
                return Err(Error::Config(format!("sweep.{k} has no values")));
            }
        }
        let total: usize = keys.iter().map(|k| self.sweep[*k].len()).product();
        let mut cells = Vec::with_capacity(total);
        for index in 0..total {
            let mut rem = index;
            let mut picks = vec![0; keys.len()];
            for (slot, k) in keys.iter().enumerate().rev() {
                let len = self.sweep[*k].len();
                picks[slot] = rem % len;
                rem /= len;
            }
            let mut value = base.clone();
            let mut labels = Vec::with_capacity(keys.len());
            for (k, &p) in keys.iter().zip(&picks) {
                let v = &self.sweep[*k][p];
                set_path(&mut value, k, v.clone())?;
                labels.push(((*k).clone(), value_label(v)));
            }
            let spec: RunSpec = value
                .try_into()
                .map_err(|e: toml::de::Error| Error::Config(format!("cell {index}: {e}")))?;
            cells.push(Cell {
                index,
                labels,
                spec,
            });
        }
        Ok(cells)
    }

    pub fn validate(&self) -> Result<Vec<Cell>> {
        if self.trials == 0 {
            return Err(Error::Config("trials must be >= 1".into()));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::Config(format!(
                "invalid experiment name {:?}",
                self.name
            )));
        }
        let cells = self.cells()?;
        for c in &cells {
            c.spec
                .validate()
                .map_err(|e| Error::Config(format!("cell {} {:?}: {e}", c.index, c.labels)))?;
        }
        Ok(cells)
    }
}

fn set_path(root: &mut toml::Value, path: &str, v: toml::Value) -> Result<()> {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.len() != 2 {
        return Err(Error::Config(format!(
            "sweep key {path:?} must look like section.key"
        )));
    }
    let section = root
        .get_mut(parts[0])
        .and_then(toml::Value::as_table_mut)
        .ok_or_else(|| Error::Config(format!("unknown sweep section {:?}", parts[0])))?;
    section.insert(parts[1].to_string(), v);
    Ok(())
}
