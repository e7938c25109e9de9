//! Client-side optimization: built-in softmax models with hand-written
//! backpropagation, mini-batch SGD and the serial multi-client trainer.
//!
//! Parameter layout (row-major, in this order):
//!
//! * `Logistic`: `W [c, d]`, `b [c]`
//! * `Mlp1`: `W1 [h, d]`, `b1 [h]`, `W2 [c, h]`, `b2 [c]` with a ReLU hidden layer

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregate::ClientUpdate;
use crate::data::Dataset;
use crate::packaging::{DType, LayoutDescriptor, ModelParameters};
use crate::partition::PartitionMap;
use crate::rng::{stream, Rng};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("shape error: {0}")]
    ShapeError(String),
    #[error("client {0} has no samples")]
    EmptyClient(u32),
    #[error("client {0} is not in the partition")]
    UnknownClient(u32),
    #[error("invalid training config: {0}")]
    BadConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Logistic,
    Mlp1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input: usize,
    /// Hidden width; ignored for `Logistic`.
    pub hidden: usize,
    pub classes: usize,
}

impl ModelSpec {
    pub fn logistic(input: usize, classes: usize) -> Self {
        Self {
            kind: ModelKind::Logistic,
            input,
            hidden: 0,
            classes,
        }
    }

    pub fn mlp1(input: usize, hidden: usize, classes: usize) -> Self {
        Self {
            kind: ModelKind::Mlp1,
            input,
            hidden,
            classes,
        }
    }

    pub fn layout(&self) -> LayoutDescriptor {
        let (d, h, c) = (self.input, self.hidden, self.classes);
        let shapes = match self.kind {
            ModelKind::Logistic => vec![vec![c, d], vec![c]],
            ModelKind::Mlp1 => vec![vec![h, d], vec![h], vec![c, h], vec![c]],
        };
        LayoutDescriptor::new(shapes, DType::F64)
    }

    pub fn param_count(&self) -> usize {
        let (d, h, c) = (self.input, self.hidden, self.classes);
        match self.kind {
            ModelKind::Logistic => d * c + c,
            ModelKind::Mlp1 => d * h + h + h * c + c,
        }
    }

    fn validate(&self) -> Result<(), TrainError> {
        if self.input == 0 || self.classes < 2 || (self.kind == ModelKind::Mlp1 && self.hidden == 0)
        {
            return Err(TrainError::ShapeError(format!("degenerate model {self:?}")));
        }
        Ok(())
    }

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every weight and bias.
    pub fn init(&self, seed: u64) -> Result<ModelParameters, TrainError> {
        self.validate()?;
        let mut rng = Rng::seed_from(seed, &[stream::INIT]);
        let mut values = Vec::with_capacity(self.param_count());
        let mut fill = |count: usize, fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            values.extend((0..count).map(|_| rng.uniform_range(-bound, bound)));
        };
        let (d, h, c) = (self.input, self.hidden, self.classes);
        match self.kind {
            ModelKind::Logistic => {
                fill(c * d + c, d);
            }
            ModelKind::Mlp1 => {
                fill(h * d + h, d);
                fill(c * h + c, h);
            }
        }
        Ok(ModelParameters::new(values, self.layout()).expect("count matches layout"))
    }

    fn check(&self, params: &[f64], x: &[f64], y: &[u32]) -> Result<(), TrainError> {
        self.validate()?;
        if params.len() != self.param_count() {
            return Err(TrainError::ShapeError(format!(
                "{} parameters, model needs {}",
                params.len(),
                self.param_count()
            )));
        }
        if x.len() != y.len() * self.input {
            return Err(TrainError::ShapeError(format!(
                "{} features for {} samples of width {}",
                x.len(),
                y.len(),
                self.input
            )));
        }
        if let Some(&bad) = y.iter().find(|&&l| l as usize >= self.classes) {
            return Err(TrainError::ShapeError(format!("label {bad} out of range")));
        }
        Ok(())
    }
}

/// Cross-entropy of the softmax of `logits` against `label`; overwrites
/// `logits` with the softmax probabilities.
fn softmax_xent(logits: &mut [f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted_target = logits[label] - max;
    let mut z = 0.0;
    for l in logits.iter_mut() {
        *l = (*l - max).exp();
        z += *l;
    }
    let loss = z.ln() - shifted_target;
    for l in logits.iter_mut() {
        *l /= z;
    }
    loss
}

fn argmax(v: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best as u32
}

/// Mean loss, predictions and, when `grad` is given, the mean gradient
/// written into it (same layout as the parameters).
fn evaluate_batch(
    spec: &ModelSpec,
    params: &[f64],
    x: &[f64],
    y: &[u32],
    mut grad: Option<&mut [f64]>,
) -> (f64, Vec<u32>) {
    let (d, h, c) = (spec.input, spec.hidden, spec.classes);
    let batch = y.len();
    if let Some(g) = grad.as_deref_mut() {
        g.fill(0.0);
    }
    if batch == 0 {
        return (0.0, Vec::new());
    }
    let scale = 1.0 / batch as f64;
    let mut preds = Vec::with_capacity(batch);
    let mut total = 0.0;
    let mut logits = vec![0.0; c];
    let mut hidden = vec![0.0; h];
    let mut dhidden = vec![0.0; h];
    for (row, &label) in x.chunks_exact(d).zip(y) {
        let label = label as usize;
        match spec.kind {
            ModelKind::Logistic => {
                let (w, b) = params.split_at(c * d);
                for k in 0..c {
                    logits[k] = b[k] + dot(&w[k * d..(k + 1) * d], row);
                }
                preds.push(argmax(&logits));
                total += softmax_xent(&mut logits, label);
                if let Some(g) = grad.as_deref_mut() {
                    logits[label] -= 1.0;
                    let (gw, gb) = g.split_at_mut(c * d);
                    for k in 0..c {
                        let dz = logits[k] * scale;
                        axpy(&mut gw[k * d..(k + 1) * d], dz, row);
                        gb[k] += dz;
                    }
                }
            }
            ModelKind::Mlp1 => {
                let (w1, rest) = params.split_at(h * d);
                let (b1, rest) = rest.split_at(h);
                let (w2, b2) = rest.split_at(c * h);
                for j in 0..h {
                    hidden[j] = (b1[j] + dot(&w1[j * d..(j + 1) * d], row)).max(0.0);
                }
                for k in 0..c {
                    logits[k] = b2[k] + dot(&w2[k * h..(k + 1) * h], &hidden);
                }
                preds.push(argmax(&logits));
                total += softmax_xent(&mut logits, label);
                if let Some(g) = grad.as_deref_mut() {
                    logits[label] -= 1.0;
                    let (gw1, rest) = g.split_at_mut(h * d);
                    let (gb1, rest) = rest.split_at_mut(h);
                    let (gw2, gb2) = rest.split_at_mut(c * h);
                    dhidden.fill(0.0);
                    for k in 0..c {
                        let dz = logits[k] * scale;
                        axpy(&mut gw2[k * h..(k + 1) * h], dz, &hidden);
                        gb2[k] += dz;
                        axpy(&mut dhidden, dz, &w2[k * h..(k + 1) * h]);
                    }
                    for j in 0..h {
                        // ReLU gate; the subgradient at exactly zero is taken as 0.
                        if hidden[j] > 0.0 {
                            axpy(&mut gw1[j * d..(j + 1) * d], dhidden[j], row);
                            gb1[j] += dhidden[j];
                        }
                    }
                }
            }
        }
    }
    (total * scale, preds)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Mean softmax cross-entropy over the batch and the argmax predictions.
pub fn forward_loss(
    spec: &ModelSpec,
    params: &[f64],
    x: &[f64],
    y: &[u32],
) -> Result<(f64, Vec<u32>), TrainError> {
    spec.check(params, x, y)?;
    Ok(evaluate_batch(spec, params, x, y, None))
}

/// Gradient of the mean loss with respect to `params`.
pub fn backward(
    spec: &ModelSpec,
    params: &[f64],
    x: &[f64],
    y: &[u32],
) -> Result<Vec<f64>, TrainError> {
    spec.check(params, x, y)?;
    let mut grad = vec![0.0; params.len()];
    evaluate_batch(spec, params, x, y, Some(&mut grad));
    Ok(grad)
}

/// Mean loss and accuracy over a whole dataset.
pub fn evaluate(
    spec: &ModelSpec,
    params: &ModelParameters,
    data: &Dataset,
) -> Result<(f64, f64), TrainError> {
    if data.dim() != spec.input {
        return Err(TrainError::ShapeError(format!(
            "dataset width {} vs model input {}",
            data.dim(),
            spec.input
        )));
    }
    spec.check(params.values(), &[], &[])?;
    let n = data.len();
    if n == 0 {
        return Ok((0.0, 0.0));
    }
    if let Some(&bad) = data.labels().iter().find(|&&l| l as usize >= spec.classes) {
        return Err(TrainError::ShapeError(format!("label {bad} out of range")));
    }
    let (loss, preds) = evaluate_batch(spec, params.values(), data.features(), data.labels(), None);
    let correct = preds
        .iter()
        .zip(data.labels())
        .filter(|(p, l)| p == l)
        .count();
    Ok((loss, correct as f64 / n as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            lr: 0.1,
            batch_size: 32,
            momentum: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::BadConfig("epochs and batch_size must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(TrainError::BadConfig(format!("lr {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::BadConfig(format!("momentum {}", self.momentum)));
        }
        Ok(())
    }
}

/// Runs `cfg.epochs` epochs of mini-batch SGD over the client's samples,
/// starting from `params`.
///
/// Batch order comes from a Fisher-Yates shuffle per epoch on the stream
/// `(cfg.seed, TRAIN, client_id, round)`; the last short batch is kept.
pub fn local_train(
    spec: &ModelSpec,
    params: &ModelParameters,
    data: &Dataset,
    indices: &[usize],
    cfg: &TrainConfig,
    client_id: u32,
    round: u32,
) -> Result<ClientUpdate, TrainError> {
    cfg.validate()?;
    if indices.is_empty() {
        return Err(TrainError::EmptyClient(client_id));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= data.len()) {
        return Err(TrainError::ShapeError(format!(
            "sample index {bad} outside dataset of {}",
            data.len()
        )));
    }
    if data.dim() != spec.input {
        return Err(TrainError::ShapeError(format!(
            "dataset width {} vs model input {}",
            data.dim(),
            spec.input
        )));
    }
    spec.check(params.values(), &[], &[])?;

    let mut rng = Rng::seed_from(cfg.seed, &[stream::TRAIN, client_id.into(), round.into()]);
    let mut w = params.values().to_vec();
    let mut grad = vec![0.0; w.len()];
    let mut velocity = vec![0.0; if cfg.momentum > 0.0 { w.len() } else { 0 }];
    let mut order = indices.to_vec();
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        for batch in order.chunks(cfg.batch_size) {
            let (x, y) = data.gather(batch);
            spec.check(&w, &x, &y)?;
            evaluate_batch(spec, &w, &x, &y, Some(&mut grad));
            if cfg.momentum > 0.0 {
                for ((wi, vi), gi) in w.iter_mut().zip(&mut velocity).zip(&grad) {
                    *vi = cfg.momentum * *vi + gi;
                    *wi -= cfg.lr * *vi;
                }
            } else {
                for (wi, gi) in w.iter_mut().zip(&grad) {
                    *wi -= cfg.lr * gi;
                }
            }
        }
    }
    Ok(ClientUpdate {
        client_id,
        params: params.with_values(w).expect("same length"),
        n_k: indices.len() as u64,
        round_trained: round,
    })
}

/// Trains every selected client one after another, each from the same
/// starting `params`. Results are in ascending client-id order.
#[allow(clippy::too_many_arguments)]
pub fn serial_train(
    spec: &ModelSpec,
    params: &ModelParameters,
    data: &Dataset,
    partition: &PartitionMap,
    selected: &[u32],
    cfg: &TrainConfig,
    round: u32,
) -> Result<Vec<ClientUpdate>, TrainError> {
    let mut ids = selected.to_vec();
    ids.sort_unstable();
    ids.dedup();
    ids.iter()
        .map(|&id| {
            let indices = partition
                .client(id)
                .ok_or(TrainError::UnknownClient(id))?;
            local_train(spec, params, data, indices, cfg, id, round)
        })
        .collect()
}

/// Client-side optimizer driven by the protocol layer.
pub trait Trainer {
    fn client_id(&self) -> u32;

    /// Trains from `global` for the given round and returns the update.
    fn train(&mut self, global: &ModelParameters, round: u32) -> Result<ClientUpdate, TrainError>;
}

/// [`local_train`] over one client's shard of a shared dataset.
#[derive(Debug, Clone)]
pub struct LocalTrainer {
    pub spec: ModelSpec,
    pub data: Arc<Dataset>,
    pub indices: Vec<usize>,
    pub cfg: TrainConfig,
    pub client_id: u32,
}

impl Trainer for LocalTrainer {
    fn client_id(&self) -> u32 {
        self.client_id
    }

    fn train(&mut self, global: &ModelParameters, round: u32) -> Result<ClientUpdate, TrainError> {
        local_train(
            &self.spec,
            global,
            &self.data,
            &self.indices,
            &self.cfg,
            self.client_id,
            round,
        )
    }
}
