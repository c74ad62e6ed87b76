//! Two-layer ReLU network with a fixed ±1 output layer.
//!
//! For an input `x ∈ R^f` and hidden weights `θ = (θ_1, ..., θ_m)`, each
//! `θ_j ∈ R^f`, the logit of class `c` is
//!
//! ```text
//! z_c = (1/√m) Σ_j s[j,c] · max(0, ⟨x, θ_j⟩)
//! ```
//!
//! with `s[j,c] ∈ {-1,+1}` drawn once and never trained. Only `θ` is
//! optimized, so the parameter dimension is `d = m·f`.

use std::ops::{Deref, DerefMut};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, RngStream};

/// Flat parameter (or message) vector of length `d = m·f`, hidden unit `j`
/// occupying `[j·f, (j+1)·f)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn zeros(dim: usize) -> Self {
        ParamVector(vec![0.0; dim])
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        ParamVector(values)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }
}

impl Deref for ParamVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl AsRef<[f64]> for ParamVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        ParamVector(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    Quadratic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkShape {
    input_dim: usize,
    width: usize,
    n_classes: usize,
    /// Row-major `width × n_classes`.
    output_signs: Vec<f64>,
}

impl NetworkShape {
    /// Draws the output signs i.i.d. uniform on {-1, +1} from `sign_seed`.
    pub fn new(input_dim: usize, width: usize, n_classes: usize, sign_seed: u64) -> Result<Self> {
        let mut r = rng::stream(sign_seed);
        let signs = (0..width * n_classes)
            .map(|_| if r.random::<bool>() { 1.0 } else { -1.0 })
            .collect();
        Self::with_signs(input_dim, width, n_classes, signs)
    }

    pub fn with_signs(
        input_dim: usize,
        width: usize,
        n_classes: usize,
        output_signs: Vec<f64>,
    ) -> Result<Self> {
        if input_dim == 0 || width == 0 || n_classes == 0 {
            return Err(Error::Shape(format!(
                "network dimensions must be positive (f={input_dim}, m={width}, C={n_classes})"
            )));
        }
        if output_signs.len() != width * n_classes {
            return Err(Error::Shape(format!(
                "expected {} output signs, got {}",
                width * n_classes,
                output_signs.len()
            )));
        }
        if output_signs.iter().any(|&s| s != 1.0 && s != -1.0) {
            return Err(Error::Shape("output signs must be ±1".into()));
        }
        Ok(NetworkShape {
            input_dim,
            width,
            n_classes,
            output_signs,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn output_signs(&self) -> &[f64] {
        &self.output_signs
    }

    /// Parameter dimension `d = m·f`.
    pub fn dim(&self) -> usize {
        self.width * self.input_dim
    }

    fn check_params(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.dim() {
            return Err(Error::Shape(format!(
                "parameter length {} != m·f = {}",
                theta.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    fn check_batch(&self, batch: &LabeledBatch) -> Result<()> {
        if batch.input_dim != self.input_dim {
            return Err(Error::Shape(format!(
                "batch feature dim {} != network input dim {}",
                batch.input_dim, self.input_dim
            )));
        }
        if let Some(&bad) = batch.labels.iter().find(|&&y| y >= self.n_classes) {
            return Err(Error::Shape(format!(
                "label {bad} >= n_classes {}",
                self.n_classes
            )));
        }
        Ok(())
    }

    /// Fills `pre` with pre-activations `⟨x, θ_j⟩` and `logits` with outputs.
    fn forward_into(&self, theta: &[f64], x: &[f64], pre: &mut [f64], logits: &mut [f64]) {
        let f = self.input_dim;
        let c = self.n_classes;
        let scale = 1.0 / (self.width as f64).sqrt();
        logits.iter_mut().for_each(|z| *z = 0.0);
        for (j, (block, p)) in theta.chunks_exact(f).zip(pre.iter_mut()).enumerate() {
            *p = block.iter().zip(x).map(|(a, b)| a * b).sum();
            if *p > 0.0 {
                let signs = &self.output_signs[j * c..(j + 1) * c];
                for (z, s) in logits.iter_mut().zip(signs) {
                    *z += s * *p;
                }
            }
        }
        logits.iter_mut().for_each(|z| *z *= scale);
    }
}

/// Rows of features with integer labels; features row-major `len × input_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    input_dim: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
}

impl LabeledBatch {
    pub fn new(input_dim: usize, features: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if input_dim == 0 || features.len() != input_dim * labels.len() {
            return Err(Error::Shape(format!(
                "{} features do not form {} rows of width {input_dim}",
                features.len(),
                labels.len()
            )));
        }
        Ok(LabeledBatch {
            input_dim,
            features,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.input_dim..(i + 1) * self.input_dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    /// Copies the given rows into a new batch.
    pub fn gather(&self, rows: &[usize]) -> LabeledBatch {
        let mut features = Vec::with_capacity(rows.len() * self.input_dim);
        for &r in rows {
            features.extend_from_slice(self.row(r));
        }
        LabeledBatch {
            input_dim: self.input_dim,
            features,
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
        }
    }
}

pub fn forward(shape: &NetworkShape, theta: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    shape.check_params(theta)?;
    if x.len() != shape.input_dim {
        return Err(Error::Shape(format!(
            "input length {} != input dim {}",
            x.len(),
            shape.input_dim
        )));
    }
    let mut pre = vec![0.0; shape.width];
    let mut logits = vec![0.0; shape.n_classes];
    shape.forward_into(theta, x, &mut pre, &mut logits);
    Ok(logits)
}

pub fn loss(logits: &[f64], label: usize, kind: LossKind) -> f64 {
    match kind {
        LossKind::CrossEntropy => {
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            (lse - logits[label]).max(0.0)
        }
        LossKind::Quadratic => {
            0.5 * logits
                .iter()
                .enumerate()
                .map(|(c, z)| {
                    let t = if c == label { 1.0 } else { 0.0 };
                    (z - t) * (z - t)
                })
                .sum::<f64>()
        }
    }
}

/// `∂loss/∂logits` written into `out`.
fn loss_grad_logits(logits: &[f64], label: usize, kind: LossKind, out: &mut [f64]) {
    match kind {
        LossKind::CrossEntropy => {
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (o, z) in out.iter_mut().zip(logits) {
                *o = (z - max).exp();
                sum += *o;
            }
            out.iter_mut().for_each(|o| *o /= sum);
            out[label] -= 1.0;
        }
        LossKind::Quadratic => {
            for (c, (o, z)) in out.iter_mut().zip(logits).enumerate() {
                *o = z - if c == label { 1.0 } else { 0.0 };
            }
        }
    }
}

/// Mean loss and mean gradient over `batch`.
///
/// For hidden unit `j` the per-sample gradient is
/// `(1/√m) · 1[⟨x,θ_j⟩ > 0] · (Σ_c ∂loss/∂z_c · s[j,c]) · x`; the ReLU
/// derivative at exactly zero is taken as zero.
pub fn loss_and_grad(
    shape: &NetworkShape,
    theta: &[f64],
    batch: &LabeledBatch,
    kind: LossKind,
) -> Result<(f64, ParamVector)> {
    shape.check_params(theta)?;
    shape.check_batch(batch)?;
    let f = shape.input_dim;
    let c = shape.n_classes;
    let scale = 1.0 / (shape.width as f64).sqrt();
    let mut grad = vec![0.0; shape.dim()];
    let mut pre = vec![0.0; shape.width];
    let mut logits = vec![0.0; c];
    let mut dz = vec![0.0; c];
    let mut total = 0.0;
    for i in 0..batch.len() {
        let x = batch.row(i);
        let y = batch.label(i);
        shape.forward_into(theta, x, &mut pre, &mut logits);
        total += loss(&logits, y, kind);
        loss_grad_logits(&logits, y, kind, &mut dz);
        for (j, (g, &p)) in grad.chunks_exact_mut(f).zip(&pre).enumerate() {
            if p <= 0.0 {
                continue;
            }
            let signs = &shape.output_signs[j * c..(j + 1) * c];
            let coeff = scale * dz.iter().zip(signs).map(|(a, s)| a * s).sum::<f64>();
            if coeff != 0.0 {
                g.iter_mut().zip(x).for_each(|(gv, xv)| *gv += coeff * xv);
            }
        }
    }
    let n = batch.len().max(1) as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    Ok((total / n, ParamVector(grad)))
}

pub fn grad_batch(
    shape: &NetworkShape,
    theta: &[f64],
    batch: &LabeledBatch,
    kind: LossKind,
) -> Result<ParamVector> {
    loss_and_grad(shape, theta, batch, kind).map(|(_, g)| g)
}

pub fn batch_loss(
    shape: &NetworkShape,
    theta: &[f64],
    batch: &LabeledBatch,
    kind: LossKind,
) -> Result<f64> {
    shape.check_params(theta)?;
    shape.check_batch(batch)?;
    if batch.is_empty() {
        return Ok(0.0);
    }
    let mut pre = vec![0.0; shape.width];
    let mut logits = vec![0.0; shape.n_classes];
    let mut total = 0.0;
    for i in 0..batch.len() {
        shape.forward_into(theta, batch.row(i), &mut pre, &mut logits);
        total += loss(&logits, batch.label(i), kind);
    }
    Ok(total / batch.len() as f64)
}

/// Fraction of rows whose arg-max logit (lowest index on ties) is the label.
/// `None` for an empty batch.
pub fn accuracy(shape: &NetworkShape, theta: &[f64], batch: &LabeledBatch) -> Result<Option<f64>> {
    shape.check_params(theta)?;
    shape.check_batch(batch)?;
    if batch.is_empty() {
        return Ok(None);
    }
    let mut pre = vec![0.0; shape.width];
    let mut logits = vec![0.0; shape.n_classes];
    let mut correct = 0usize;
    for i in 0..batch.len() {
        shape.forward_into(theta, batch.row(i), &mut pre, &mut logits);
        let mut best = 0;
        for c in 1..logits.len() {
            if logits[c] > logits[best] {
                best = c;
            }
        }
        correct += usize::from(best == batch.label(i));
    }
    Ok(Some(correct as f64 / batch.len() as f64))
}

/// I.i.d. `N(0, init_scale²)` entries.
pub fn init_params(
    shape: &NetworkShape,
    init_scale: f64,
    rng: &mut RngStream,
) -> Result<ParamVector> {
    if !(init_scale > 0.0) || !init_scale.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "init_scale must be positive, got {init_scale}"
        )));
    }
    let normal =
        Normal::new(0.0, init_scale).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    Ok(ParamVector(
        (0..shape.dim()).map(|_| normal.sample(rng)).collect(),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub width: usize,
    pub input_dim: usize,
    pub n_classes: usize,
    #[serde(default = "default_loss")]
    pub loss: LossKind,
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_seed: Option<u64>,
}

fn default_loss() -> LossKind {
    LossKind::CrossEntropy
}

fn default_init_scale() -> f64 {
    1.0
}
