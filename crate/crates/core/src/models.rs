//! Small trainable models with exact gradients.
//!
//! Parameters live in one flat `f64` vector so that aggregation, model
//! averaging and checkpointing never need to know the architecture.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One labeled sample. For the quadratic objective `features` is the target
/// point and `label` is ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: u32,
}

impl Sample {
    pub fn new(features: Vec<f64>, label: u32) -> Self {
        Self { features, label }
    }
}

/// Which (round, cluster) produced a set of parameters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelVersion {
    pub round: u64,
    pub cluster: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub values: Vec<f64>,
    pub version: ModelVersion,
}

impl ModelParams {
    pub fn new(values: Vec<f64>) -> Self {
        Self {
            values,
            version: ModelVersion::default(),
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Unweighted element-wise mean of several parameter vectors.
    pub fn mean_of<'a>(models: impl IntoIterator<Item = &'a ModelParams>) -> Result<ModelParams> {
        let mut iter = models.into_iter();
        let first = iter
            .next()
            .ok_or_else(|| Error::InvalidInput("mean of zero models".into()))?;
        let mut acc = first.values.clone();
        let mut n = 1usize;
        for m in iter {
            if m.dim() != acc.len() {
                return Err(Error::DimensionMismatch {
                    expected: acc.len(),
                    got: m.dim(),
                });
            }
            for (a, v) in acc.iter_mut().zip(&m.values) {
                *a += v;
            }
            n += 1;
        }
        let inv = n as f64;
        acc.iter_mut().for_each(|a| *a /= inv);
        Ok(ModelParams::new(acc))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Softmax,
    Mlp,
    Quadratic,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Softmax => "softmax",
            ModelKind::Mlp => "mlp",
            ModelKind::Quadratic => "quadratic",
        }
    }
}

/// Architecture of a task model. The quadratic objective
/// `f(x) = mean_s ||x - s.features||^2 / 2` exists for analytic checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskModel {
    Softmax { input_dim: usize, num_labels: usize },
    Mlp { input_dim: usize, hidden: usize, num_labels: usize },
    Quadratic { dim: usize },
}

impl TaskModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            TaskModel::Softmax { .. } => ModelKind::Softmax,
            TaskModel::Mlp { .. } => ModelKind::Mlp,
            TaskModel::Quadratic { .. } => ModelKind::Quadratic,
        }
    }

    pub fn dim(&self) -> usize {
        match *self {
            TaskModel::Softmax { input_dim, num_labels } => num_labels * (input_dim + 1),
            TaskModel::Mlp { input_dim, hidden, num_labels } => {
                hidden * (input_dim + 1) + num_labels * (hidden + 1)
            }
            TaskModel::Quadratic { dim } => dim,
        }
    }

    fn input_dim(&self) -> usize {
        match *self {
            TaskModel::Softmax { input_dim, .. } | TaskModel::Mlp { input_dim, .. } => input_dim,
            TaskModel::Quadratic { dim } => dim,
        }
    }

    pub fn num_labels(&self) -> Option<usize> {
        match *self {
            TaskModel::Softmax { num_labels, .. } | TaskModel::Mlp { num_labels, .. } => {
                Some(num_labels)
            }
            TaskModel::Quadratic { .. } => None,
        }
    }

    /// Initial parameters: zeros except the MLP's first layer, which needs
    /// a random start to break symmetry.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut params = vec![0.0; self.dim()];
        if let TaskModel::Mlp { input_dim, hidden, .. } = *self {
            let normal = Normal::new(0.0, 1.0 / (input_dim as f64).sqrt()).expect("valid std");
            for w in params.iter_mut().take(hidden * input_dim) {
                *w = normal.sample(rng);
            }
        }
        params
    }

    fn check_batch(&self, params: &[f64], batch: &[&Sample]) -> Result<()> {
        if params.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: params.len(),
            });
        }
        if batch.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let d = self.input_dim();
        for s in batch {
            if s.features.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: s.features.len(),
                });
            }
            if let Some(l) = self.num_labels() {
                if s.label as usize >= l {
                    return Err(Error::InvalidInput(format!(
                        "label {} out of range for {} labels",
                        s.label, l
                    )));
                }
            }
        }
        Ok(())
    }

    /// Mean loss over the batch and its exact gradient.
    pub fn loss_and_grad(&self, params: &[f64], batch: &[&Sample]) -> Result<(f64, Vec<f64>)> {
        self.check_batch(params, batch)?;
        let (loss, grad) = match *self {
            TaskModel::Softmax { input_dim, num_labels } => {
                softmax_loss_grad(params, batch, input_dim, num_labels)
            }
            TaskModel::Mlp { input_dim, hidden, num_labels } => {
                mlp_loss_grad(params, batch, input_dim, hidden, num_labels)
            }
            TaskModel::Quadratic { .. } => quadratic_loss_grad(params, batch),
        };
        if !loss.is_finite() {
            return Err(Error::NonFinite { index: 0 });
        }
        if let Some(index) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok((loss, grad))
    }

    /// Mean loss only.
    pub fn loss(&self, params: &[f64], batch: &[&Sample]) -> Result<f64> {
        self.loss_and_grad(params, batch).map(|(l, _)| l)
    }

    /// Class scores for one input.
    pub fn logits(&self, params: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        match *self {
            TaskModel::Softmax { input_dim, num_labels } => {
                Ok(softmax_logits(params, x, input_dim, num_labels))
            }
            TaskModel::Mlp { input_dim, hidden, num_labels } => {
                let h = mlp_hidden(params, x, input_dim, hidden);
                Ok(mlp_output(params, &h, input_dim, hidden, num_labels))
            }
            TaskModel::Quadratic { .. } => Err(Error::InvalidInput(
                "quadratic objective has no class scores".into(),
            )),
        }
    }

    /// Top-1 prediction; ties go to the lowest label index.
    pub fn predict(&self, params: &[f64], x: &[f64]) -> Result<u32> {
        let logits = self.logits(params, x)?;
        Ok(argmax(&logits) as u32)
    }

    /// Top-1 accuracy on a non-empty test set.
    pub fn evaluate(&self, params: &[f64], test: &[Sample]) -> Result<f64> {
        if test.is_empty() {
            return Err(Error::InvalidInput("empty test set".into()));
        }
        if params.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: params.len(),
            });
        }
        let mut correct = 0usize;
        for s in test {
            if self.predict(params, &s.features)? == s.label {
                correct += 1;
            }
        }
        Ok(correct as f64 / test.len() as f64)
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn log_softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|z| (z - max).exp()).sum();
    let lse = max + sum.ln();
    logits.iter_mut().for_each(|z| *z -= lse);
}

fn softmax_logits(params: &[f64], x: &[f64], input_dim: usize, num_labels: usize) -> Vec<f64> {
    let bias = &params[num_labels * input_dim..];
    (0..num_labels)
        .map(|c| {
            let row = &params[c * input_dim..(c + 1) * input_dim];
            row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>() + bias[c]
        })
        .collect()
}

fn softmax_loss_grad(
    params: &[f64],
    batch: &[&Sample],
    input_dim: usize,
    num_labels: usize,
) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; params.len()];
    let mut loss = 0.0;
    let bias_off = num_labels * input_dim;
    for s in batch {
        let mut logp = softmax_logits(params, &s.features, input_dim, num_labels);
        log_softmax_in_place(&mut logp);
        let y = s.label as usize;
        loss -= logp[y];
        for c in 0..num_labels {
            let coef = logp[c].exp() - if c == y { 1.0 } else { 0.0 };
            let row = &mut grad[c * input_dim..(c + 1) * input_dim];
            for (g, xi) in row.iter_mut().zip(&s.features) {
                *g += coef * xi;
            }
            grad[bias_off + c] += coef;
        }
    }
    let n = batch.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    (loss / n, grad)
}

// Layout: W1 (hidden x input), b1 (hidden), W2 (labels x hidden), b2 (labels).
fn mlp_hidden(params: &[f64], x: &[f64], input_dim: usize, hidden: usize) -> Vec<f64> {
    let b1 = &params[hidden * input_dim..hidden * (input_dim + 1)];
    (0..hidden)
        .map(|j| {
            let row = &params[j * input_dim..(j + 1) * input_dim];
            (row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>() + b1[j]).tanh()
        })
        .collect()
}

fn mlp_output(
    params: &[f64],
    h: &[f64],
    input_dim: usize,
    hidden: usize,
    num_labels: usize,
) -> Vec<f64> {
    let off = hidden * (input_dim + 1);
    let w2 = &params[off..off + num_labels * hidden];
    let b2 = &params[off + num_labels * hidden..];
    (0..num_labels)
        .map(|c| {
            let row = &w2[c * hidden..(c + 1) * hidden];
            row.iter().zip(h).map(|(w, hj)| w * hj).sum::<f64>() + b2[c]
        })
        .collect()
}

fn mlp_loss_grad(
    params: &[f64],
    batch: &[&Sample],
    input_dim: usize,
    hidden: usize,
    num_labels: usize,
) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; params.len()];
    let mut loss = 0.0;
    let b1_off = hidden * input_dim;
    let w2_off = hidden * (input_dim + 1);
    let b2_off = w2_off + num_labels * hidden;
    let mut dh = vec![0.0; hidden];
    for s in batch {
        let h = mlp_hidden(params, &s.features, input_dim, hidden);
        let mut logp = mlp_output(params, &h, input_dim, hidden, num_labels);
        log_softmax_in_place(&mut logp);
        let y = s.label as usize;
        loss -= logp[y];
        dh.iter_mut().for_each(|v| *v = 0.0);
        for c in 0..num_labels {
            let coef = logp[c].exp() - if c == y { 1.0 } else { 0.0 };
            let w_row = w2_off + c * hidden;
            for j in 0..hidden {
                grad[w_row + j] += coef * h[j];
                dh[j] += coef * params[w_row + j];
            }
            grad[b2_off + c] += coef;
        }
        for j in 0..hidden {
            let dz = dh[j] * (1.0 - h[j] * h[j]);
            let row = &mut grad[j * input_dim..(j + 1) * input_dim];
            for (g, xi) in row.iter_mut().zip(&s.features) {
                *g += dz * xi;
            }
            grad[b1_off + j] += dz;
        }
    }
    let n = batch.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    (loss / n, grad)
}

fn quadratic_loss_grad(params: &[f64], batch: &[&Sample]) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; params.len()];
    let mut loss = 0.0;
    for s in batch {
        for ((g, x), a) in grad.iter_mut().zip(params).zip(&s.features) {
            let d = x - a;
            loss += 0.5 * d * d;
            *g += d;
        }
    }
    let n = batch.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    (loss / n, grad)
}
