//! Small differentiable classifiers with exact analytic gradients.
//!
//! Parameter layout is a fixed, documented part of the contract because
//! the analytic inversion attack and the state-override payloads index
//! into it:
//!
//! * `linear-softmax`: weight block `num_classes x input_dim` (row-major),
//!   then bias block `num_classes`.
//! * `mlp-1-hidden`: `W1` (`hidden_dim x input_dim`), `b1` (`hidden_dim`),
//!   `W2` (`num_classes x hidden_dim`), `b2` (`num_classes`).

use crate::numkit::{Matrix, NumError, ParamVec, StreamRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("invalid hyperparameter: {0}")]
    InvalidHyper(String),
    #[error(transparent)]
    Num(#[from] NumError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    LinearSoftmax,
    Mlp1Hidden,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub num_classes: usize,
    /// Hidden width; required for `mlp-1-hidden`, ignored otherwise.
    pub hidden_dim: Option<usize>,
    pub activation: Activation,
}

impl ModelSpec {
    pub fn linear_softmax(input_dim: usize, num_classes: usize) -> Self {
        Self {
            kind: ModelKind::LinearSoftmax,
            input_dim,
            num_classes,
            hidden_dim: None,
            activation: Activation::Relu,
        }
    }

    pub fn mlp(input_dim: usize, hidden_dim: usize, num_classes: usize, activation: Activation) -> Self {
        Self {
            kind: ModelKind::Mlp1Hidden,
            input_dim,
            num_classes,
            hidden_dim: Some(hidden_dim),
            activation,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.input_dim == 0 || self.num_classes < 2 {
            return Err(ModelError::InvalidSpec(
                "input_dim must be >= 1 and num_classes >= 2".into(),
            ));
        }
        if self.kind == ModelKind::Mlp1Hidden && self.hidden_dim.unwrap_or(0) == 0 {
            return Err(ModelError::InvalidSpec(
                "mlp-1-hidden requires hidden_dim >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        match self.kind {
            ModelKind::LinearSoftmax => self.num_classes * self.input_dim + self.num_classes,
            ModelKind::Mlp1Hidden => {
                let h = self.hidden_dim.unwrap_or(0);
                h * self.input_dim + h + self.num_classes * h + self.num_classes
            }
        }
    }

    fn check_params(&self, params: &ParamVec) -> Result<(), ModelError> {
        self.validate()?;
        if params.len() != self.param_count() {
            return Err(ModelError::DimensionMismatch(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        Ok(())
    }
}

/// A mini-batch: inputs are `batch x input_dim`, labels are class indices.
#[derive(Clone, Debug)]
pub struct Batch {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Matrix, labels: Vec<usize>) -> Result<Self, ModelError> {
        if inputs.rows() == 0 {
            return Err(ModelError::DimensionMismatch("batch must be non-empty".into()));
        }
        if inputs.rows() != labels.len() {
            return Err(ModelError::DimensionMismatch(format!(
                "{} input rows vs {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        Ok(Self { inputs, labels })
    }

    pub fn size(&self) -> usize {
        self.inputs.rows()
    }

    fn check(&self, spec: &ModelSpec) -> Result<(), ModelError> {
        if self.inputs.cols() != spec.input_dim {
            return Err(ModelError::DimensionMismatch(format!(
                "batch feature dim {} vs model input dim {}",
                self.inputs.cols(),
                spec.input_dim
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= spec.num_classes) {
            return Err(ModelError::DimensionMismatch(format!(
                "label {bad} out of range for {} classes",
                spec.num_classes
            )));
        }
        Ok(())
    }
}

/// Common initialization shared by all users: per-coordinate uniform in
/// `[-s, s]` with `s = 1/sqrt(fan_in)` of the block's layer.
pub fn init_params(spec: &ModelSpec, rng: &mut StreamRng) -> Result<ParamVec, ModelError> {
    spec.validate()?;
    let mut values = Vec::with_capacity(spec.param_count());
    let fill = |count: usize, fan_in: usize, rng: &mut StreamRng, out: &mut Vec<f64>| {
        let s = 1.0 / (fan_in as f64).sqrt();
        for _ in 0..count {
            out.push(rng.range_f64(-s, s));
        }
    };
    match spec.kind {
        ModelKind::LinearSoftmax => {
            let (c, d) = (spec.num_classes, spec.input_dim);
            fill(c * d + c, d, rng, &mut values);
        }
        ModelKind::Mlp1Hidden => {
            let (c, d, h) = (spec.num_classes, spec.input_dim, spec.hidden_dim.unwrap());
            fill(h * d + h, d, rng, &mut values);
            fill(c * h + c, h, rng, &mut values);
        }
    }
    Ok(ParamVec::from_values(values)?)
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

fn activate(a: Activation, x: f64) -> f64 {
    match a {
        Activation::Relu => x.max(0.0),
        Activation::Tanh => x.tanh(),
    }
}

fn activate_deriv(a: Activation, pre: f64) -> f64 {
    match a {
        Activation::Relu => {
            if pre > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Activation::Tanh => {
            let t = pre.tanh();
            1.0 - t * t
        }
    }
}

struct Forward {
    /// Pre-activations of the hidden layer (mlp only).
    pre_hidden: Vec<f64>,
    hidden: Vec<f64>,
    probs: Vec<f64>,
}

fn forward(spec: &ModelSpec, params: &ParamVec, x: &[f64]) -> Forward {
    let p = params.as_slice();
    match spec.kind {
        ModelKind::LinearSoftmax => {
            let (c, d) = (spec.num_classes, spec.input_dim);
            let mut logits = vec![0.0; c];
            for k in 0..c {
                let row = &p[k * d..(k + 1) * d];
                let mut z = p[c * d + k];
                for (w, xi) in row.iter().zip(x) {
                    z += w * xi;
                }
                logits[k] = z;
            }
            Forward {
                pre_hidden: Vec::new(),
                hidden: Vec::new(),
                probs: softmax(&logits),
            }
        }
        ModelKind::Mlp1Hidden => {
            let (c, d, h) = (spec.num_classes, spec.input_dim, spec.hidden_dim.unwrap());
            let w1 = &p[..h * d];
            let b1 = &p[h * d..h * d + h];
            let w2 = &p[h * d + h..h * d + h + c * h];
            let b2 = &p[h * d + h + c * h..];
            let mut pre_hidden = vec![0.0; h];
            let mut hidden = vec![0.0; h];
            for j in 0..h {
                let mut z = b1[j];
                for (w, xi) in w1[j * d..(j + 1) * d].iter().zip(x) {
                    z += w * xi;
                }
                pre_hidden[j] = z;
                hidden[j] = activate(spec.activation, z);
            }
            let mut logits = vec![0.0; c];
            for k in 0..c {
                let mut z = b2[k];
                for (w, hj) in w2[k * h..(k + 1) * h].iter().zip(&hidden) {
                    z += w * hj;
                }
                logits[k] = z;
            }
            Forward {
                pre_hidden,
                hidden,
                probs: softmax(&logits),
            }
        }
    }
}

/// Class probabilities for a single input row.
pub fn predict_probs(spec: &ModelSpec, params: &ParamVec, x: &[f64]) -> Result<Vec<f64>, ModelError> {
    spec.check_params(params)?;
    if x.len() != spec.input_dim {
        return Err(ModelError::DimensionMismatch(format!(
            "input dim {} vs model input dim {}",
            x.len(),
            spec.input_dim
        )));
    }
    Ok(forward(spec, params, x).probs)
}

/// Mean cross-entropy over the batch.
pub fn loss(spec: &ModelSpec, params: &ParamVec, batch: &Batch) -> Result<f64, ModelError> {
    spec.check_params(params)?;
    batch.check(spec)?;
    let mut total = 0.0;
    for (i, &y) in batch.labels.iter().enumerate() {
        let probs = forward(spec, params, batch.inputs.row(i)).probs;
        total += -(probs[y].max(1e-300)).ln();
    }
    Ok(total / batch.size() as f64)
}

/// Exact analytic gradient of [`loss`] with respect to the parameters.
pub fn gradient(spec: &ModelSpec, params: &ParamVec, batch: &Batch) -> Result<ParamVec, ModelError> {
    spec.check_params(params)?;
    batch.check(spec)?;
    let p = params.as_slice();
    let mut g = vec![0.0; params.len()];
    let inv_b = 1.0 / batch.size() as f64;
    match spec.kind {
        ModelKind::LinearSoftmax => {
            let (c, d) = (spec.num_classes, spec.input_dim);
            for (i, &y) in batch.labels.iter().enumerate() {
                let x = batch.inputs.row(i);
                let probs = forward(spec, params, x).probs;
                for k in 0..c {
                    let dz = (probs[k] - if k == y { 1.0 } else { 0.0 }) * inv_b;
                    for (slot, xi) in g[k * d..(k + 1) * d].iter_mut().zip(x) {
                        *slot += dz * xi;
                    }
                    g[c * d + k] += dz;
                }
            }
        }
        ModelKind::Mlp1Hidden => {
            let (c, d, h) = (spec.num_classes, spec.input_dim, spec.hidden_dim.unwrap());
            let w2_off = h * d + h;
            let b2_off = w2_off + c * h;
            for (i, &y) in batch.labels.iter().enumerate() {
                let x = batch.inputs.row(i);
                let fwd = forward(spec, params, x);
                let mut dz = fwd.probs.clone();
                dz[y] -= 1.0;
                for v in dz.iter_mut() {
                    *v *= inv_b;
                }
                // Output layer.
                for k in 0..c {
                    for (slot, hj) in g[w2_off + k * h..w2_off + (k + 1) * h]
                        .iter_mut()
                        .zip(&fwd.hidden)
                    {
                        *slot += dz[k] * hj;
                    }
                    g[b2_off + k] += dz[k];
                }
                // Hidden layer.
                for j in 0..h {
                    let mut dh = 0.0;
                    for k in 0..c {
                        dh += p[w2_off + k * h + j] * dz[k];
                    }
                    let da = dh * activate_deriv(spec.activation, fwd.pre_hidden[j]);
                    if da == 0.0 {
                        continue;
                    }
                    for (slot, xi) in g[j * d..(j + 1) * d].iter_mut().zip(x) {
                        *slot += da * xi;
                    }
                    g[h * d + j] += da;
                }
            }
        }
    }
    Ok(ParamVec::from_values(g)?)
}

/// `steps` successive full-batch gradient steps on the given batch;
/// returns the model update (parameters after local optimization).
pub fn sgd_step(
    spec: &ModelSpec,
    params: &ParamVec,
    batch: &Batch,
    lr: f64,
    steps: usize,
) -> Result<ParamVec, ModelError> {
    if !(lr > 0.0) {
        return Err(ModelError::InvalidHyper(format!("lr must be > 0, got {lr}")));
    }
    if steps == 0 {
        return Err(ModelError::InvalidHyper("steps must be >= 1".into()));
    }
    let mut current = params.clone();
    for _ in 0..steps {
        let g = gradient(spec, &current, batch)?;
        current = ParamVec::axpy(-lr, &g, &current)?;
    }
    Ok(current)
}

/// One SGD step with a persistent momentum buffer:
/// `v <- momentum*v + g`, `theta <- theta - lr*v`.
pub fn sgd_step_momentum(
    spec: &ModelSpec,
    params: &ParamVec,
    batch: &Batch,
    lr: f64,
    momentum: f64,
    velocity: &mut ParamVec,
) -> Result<ParamVec, ModelError> {
    if !(lr > 0.0) {
        return Err(ModelError::InvalidHyper(format!("lr must be > 0, got {lr}")));
    }
    let g = gradient(spec, params, batch)?;
    let v = ParamVec::axpy(momentum, velocity, &g)?;
    let next = ParamVec::axpy(-lr, &v, params)?;
    *velocity = v;
    Ok(next)
}
