//! Online classifiers with probability outputs, trained by Adam on mean
//! cross-entropy.
//!
//! Parameters live in one flat `Vec<f64>`; [`ModelSpec::layout`] names the
//! tensors inside it (row-major) for checkpoints and tests.
//!
//! Training schedule of a [`ModelState`]:
//! - seed training: `epochs` passes over the seed data in shuffled
//!   mini-batches;
//! - every absorbed example: one Adam step on that example alone;
//! - every `retrain_period` absorbed examples: `epochs` more passes over all
//!   owned data, warm-started from the current parameters and moments
//!   (or from a fresh initialization when `cold_restart` is set).

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledExample;
use crate::error::{Error, Result};
use crate::seed;

const INIT_RANGE: f64 = 0.05;
const RETRAIN_STREAM: u64 = 0x5245_5452;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub retrain_period: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub init_seed: u64,
    /// Re-initialize parameters and optimizer state before each periodic
    /// retrain instead of warm-starting.
    pub cold_restart: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            learning_rate: 1e-2,
            batch_size: 64,
            retrain_period: 50,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            init_seed: 0,
            cold_restart: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(format!("train config: {m}")));
        if self.epochs < 1 {
            return bad("epochs must be at least 1");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1");
        }
        if self.retrain_period < 1 {
            return bad("retrain_period must be at least 1");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(self.adam_epsilon > 0.0) {
            return bad("adam_epsilon must be positive");
        }
        Ok(())
    }

    fn adam(&self) -> AdamParams {
        AdamParams {
            lr: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            epsilon: self.adam_epsilon,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Logistic,
    OneHiddenLayer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Ignored for `Logistic`.
    pub hidden_nodes: usize,
    pub input_dim: usize,
    pub n_classes: usize,
}

/// A named slice of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSlot {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub offset: usize,
    /// Biases are initialized to zero, weights uniformly.
    pub is_bias: bool,
}

impl TensorSlot {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl ModelSpec {
    pub fn logistic(input_dim: usize, n_classes: usize) -> Self {
        Self {
            kind: ModelKind::Logistic,
            hidden_nodes: 0,
            input_dim,
            n_classes,
        }
    }

    pub fn one_hidden_layer(input_dim: usize, hidden_nodes: usize, n_classes: usize) -> Self {
        Self {
            kind: ModelKind::OneHiddenLayer,
            hidden_nodes,
            input_dim,
            n_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::invalid("model input_dim must be positive"));
        }
        if self.n_classes < 2 {
            return Err(Error::SingleClass(self.n_classes));
        }
        if self.kind == ModelKind::OneHiddenLayer && self.hidden_nodes < 1 {
            return Err(Error::invalid("one-hidden-layer model needs hidden_nodes >= 1"));
        }
        Ok(())
    }

    pub fn layout(&self) -> Vec<TensorSlot> {
        let (d, k, h) = (self.input_dim, self.n_classes, self.hidden_nodes);
        let shapes: Vec<(&'static str, Vec<usize>, bool)> = match self.kind {
            ModelKind::Logistic => vec![("weight", vec![k, d], false), ("bias", vec![k], true)],
            ModelKind::OneHiddenLayer => vec![
                ("hidden.weight", vec![h, d], false),
                ("hidden.bias", vec![h], true),
                ("output.weight", vec![k, h], false),
                ("output.bias", vec![k], true),
            ],
        };
        let mut offset = 0;
        shapes
            .into_iter()
            .map(|(name, shape, is_bias)| {
                let slot = TensorSlot {
                    name,
                    shape,
                    offset,
                    is_bias,
                };
                offset += slot.len();
                slot
            })
            .collect()
    }

    pub fn n_params(&self) -> usize {
        self.layout().iter().map(TensorSlot::len).sum()
    }

    /// Weights uniform in `[-0.05, 0.05]`, biases zero.
    pub fn init_params(&self, init_seed: u64) -> Vec<f64> {
        let mut rng = seed::rng(init_seed);
        let mut params = vec![0.0; self.n_params()];
        for slot in self.layout().iter().filter(|s| !s.is_bias) {
            for p in &mut params[slot.offset..slot.offset + slot.len()] {
                *p = rng.random_range(-INIT_RANGE..=INIT_RANGE);
            }
        }
        params
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                found: x.len(),
            });
        }
        Ok(())
    }

    fn check_params(&self, params: &[f64]) -> Result<()> {
        let n = self.n_params();
        if params.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: params.len(),
            });
        }
        Ok(())
    }

    /// Output logits; for the hidden-layer model also returns the hidden
    /// pre-activations.
    fn forward(&self, params: &[f64], x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (d, k) = (self.input_dim, self.n_classes);
        match self.kind {
            ModelKind::Logistic => {
                let (w, b) = params.split_at(k * d);
                (affine(w, b, x), Vec::new())
            }
            ModelKind::OneHiddenLayer => {
                let h = self.hidden_nodes;
                let (w1, rest) = params.split_at(h * d);
                let (b1, rest) = rest.split_at(h);
                let (w2, b2) = rest.split_at(k * h);
                let pre = affine(w1, b1, x);
                let act: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();
                (affine(w2, b2, &act), pre)
            }
        }
    }

    pub fn logits(&self, params: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        self.check_params(params)?;
        self.check_input(x)?;
        Ok(self.forward(params, x).0)
    }

    /// Mean cross-entropy over `batch`.
    pub fn loss(&self, params: &[f64], batch: &[&LabeledExample]) -> Result<f64> {
        self.check_params(params)?;
        let mut total = 0.0;
        for ex in batch {
            self.check_input(&ex.features)?;
            let logits = self.forward(params, &ex.features).0;
            total += log_sum_exp(&logits) - logits[ex.label];
        }
        Ok(total / batch.len().max(1) as f64)
    }

    /// Mean cross-entropy over `batch` and its gradient with respect to the
    /// flat parameter vector.
    pub fn loss_and_grad(&self, params: &[f64], batch: &[&LabeledExample]) -> Result<(f64, Vec<f64>)> {
        self.check_params(params)?;
        let (d, k) = (self.input_dim, self.n_classes);
        let mut grad = vec![0.0; params.len()];
        let mut total = 0.0;
        for ex in batch {
            self.check_input(&ex.features)?;
            if ex.label >= k {
                return Err(Error::invalid(format!("label {} >= K = {k}", ex.label)));
            }
            let x = &ex.features;
            let (logits, pre) = self.forward(params, x);
            let lse = log_sum_exp(&logits);
            total += lse - logits[ex.label];
            // d loss / d logits = softmax - onehot
            let mut dl: Vec<f64> = logits.iter().map(|z| (z - lse).exp()).collect();
            dl[ex.label] -= 1.0;

            match self.kind {
                ModelKind::Logistic => {
                    let (gw, gb) = grad.split_at_mut(k * d);
                    outer_acc(gw, &dl, x);
                    gb.iter_mut().zip(&dl).for_each(|(g, v)| *g += v);
                }
                ModelKind::OneHiddenLayer => {
                    let h = self.hidden_nodes;
                    let w2 = &params[h * d + h..h * d + h + k * h];
                    let act: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();
                    let mut dpre = vec![0.0; h];
                    for (c, dlc) in dl.iter().enumerate() {
                        for (j, dp) in dpre.iter_mut().enumerate() {
                            *dp += w2[c * h + j] * dlc;
                        }
                    }
                    for (dp, p) in dpre.iter_mut().zip(&pre) {
                        if *p <= 0.0 {
                            *dp = 0.0;
                        }
                    }
                    let (gw1, rest) = grad.split_at_mut(h * d);
                    let (gb1, rest) = rest.split_at_mut(h);
                    let (gw2, gb2) = rest.split_at_mut(k * h);
                    outer_acc(gw1, &dpre, x);
                    gb1.iter_mut().zip(&dpre).for_each(|(g, v)| *g += v);
                    outer_acc(gw2, &dl, &act);
                    gb2.iter_mut().zip(&dl).for_each(|(g, v)| *g += v);
                }
            }
        }
        let n = batch.len().max(1) as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        Ok((total / n, grad))
    }
}

fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    b.iter()
        .enumerate()
        .map(|(r, bias)| {
            let row = &w[r * x.len()..(r + 1) * x.len()];
            bias + row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>()
        })
        .collect()
}

/// `g[r][c] += a[r] * b[c]` on a row-major `g`.
fn outer_acc(g: &mut [f64], a: &[f64], b: &[f64]) {
    for (r, ar) in a.iter().enumerate() {
        for (gc, bc) in g[r * b.len()..(r + 1) * b.len()].iter_mut().zip(b) {
            *gc += ar * bc;
        }
    }
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Class-probability vector; non-negative and summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityEstimate(Vec<f64>);

impl ProbabilityEstimate {
    /// Softmax of `logits`, shifted by the maximum before exponentiation.
    pub fn from_logits(logits: &[f64]) -> Self {
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        Self(exps.into_iter().map(|e| e / total).collect())
    }

    /// Wraps an explicit distribution, checking non-negativity and a sum of
    /// one within 1e-9.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() || probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::invalid("probabilities must be finite and non-negative"));
        }
        let s: f64 = probs.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("probabilities sum to {s}")));
        }
        Ok(Self(probs))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn n_classes(&self) -> usize {
        self.0.len()
    }

    /// Index of the largest entry; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Number of updates applied so far.
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Increments `state.step` first, so the
/// first update uses `step = 1`.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, hp: AdamParams) -> Result<()> {
    let n = params.len();
    for len in [grads.len(), state.m.len(), state.v.len()] {
        if len != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: len,
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for i in 0..n {
        let g = grads[i];
        state.m[i] = hp.beta1 * state.m[i] + (1.0 - hp.beta1) * g;
        state.v[i] = hp.beta2 * state.v[i] + (1.0 - hp.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= hp.lr * m_hat / (v_hat.sqrt() + hp.epsilon);
    }
    Ok(())
}

/// Anything that labels a feature vector. Metrics are written against this
/// so they can be exercised with hand-built predictors.
pub trait Classifier {
    fn predict_label(&self, x: &[f64]) -> Result<usize>;
}

/// A trained model together with its training data and optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub spec: ModelSpec,
    pub params: Vec<f64>,
    pub adam: AdamState,
    pub owned_data: Vec<LabeledExample>,
    pub since_retrain: usize,
    /// Full training passes so far, including seed training.
    pub retrain_count: u64,
}

impl ModelState {
    /// A model with all-zero parameters and no data. Mostly useful in tests.
    pub fn zeros(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let n = spec.n_params();
        Ok(Self {
            spec,
            params: vec![0.0; n],
            adam: AdamState::new(n),
            owned_data: Vec::new(),
            since_retrain: 0,
            retrain_count: 0,
        })
    }

    /// Initializes from `cfg.init_seed` and trains on `seed_data`.
    pub fn init_and_seed_train(spec: ModelSpec, seed_data: Vec<LabeledExample>, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        spec.validate()?;
        if seed_data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        for ex in &seed_data {
            spec.check_input(&ex.features)?;
        }
        let mut state = Self::zeros(spec)?;
        state.params = state.spec.init_params(cfg.init_seed);
        state.owned_data = seed_data;
        state.full_train(cfg)?;
        Ok(state)
    }

    pub fn predict_proba(&self, x: &[f64]) -> Result<ProbabilityEstimate> {
        Ok(ProbabilityEstimate::from_logits(&self.spec.logits(&self.params, x)?))
    }

    pub fn predict_label(&self, x: &[f64]) -> Result<usize> {
        Ok(self.predict_proba(x)?.argmax())
    }

    /// Adds `ex` to the owned data, takes one Adam step on it, and runs a
    /// full retrain when the retrain period is reached. Returns whether a
    /// retrain happened.
    pub fn absorb_datum(&mut self, ex: LabeledExample, cfg: &TrainConfig) -> Result<bool> {
        cfg.validate()?;
        self.spec.check_input(&ex.features)?;
        let (_, grad) = self.spec.loss_and_grad(&self.params, &[&ex])?;
        adam_step(&mut self.params, &grad, &mut self.adam, cfg.adam())?;
        self.owned_data.push(ex);
        self.since_retrain += 1;
        if self.since_retrain >= cfg.retrain_period {
            if cfg.cold_restart {
                self.params = self.spec.init_params(cfg.init_seed);
                self.adam = AdamState::new(self.params.len());
            }
            self.full_train(cfg)?;
            return Ok(true);
        }
        Ok(false)
    }

    /// `cfg.epochs` shuffled mini-batch passes over all owned data. The
    /// shuffle stream is derived from `(init_seed, retrain_count)`.
    fn full_train(&mut self, cfg: &TrainConfig) -> Result<()> {
        let mut rng = seed::rng(seed::derive_path(
            cfg.init_seed,
            &[RETRAIN_STREAM, self.retrain_count],
        ));
        let mut order: Vec<usize> = (0..self.owned_data.len()).collect();
        let hp = cfg.adam();
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.batch_size) {
                let batch: Vec<&LabeledExample> = chunk.iter().map(|&i| &self.owned_data[i]).collect();
                let (_, grad) = self.spec.loss_and_grad(&self.params, &batch)?;
                adam_step(&mut self.params, &grad, &mut self.adam, hp)?;
            }
        }
        self.retrain_count += 1;
        self.since_retrain = 0;
        Ok(())
    }

    /// Hash of the parameter and optimizer bits. Any change to the model's
    /// learnable state changes it (up to hash collisions).
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for v in self.params.iter().chain(&self.adam.m).chain(&self.adam.v) {
            v.to_bits().hash(&mut h);
        }
        self.adam.step.hash(&mut h);
        self.owned_data.len().hash(&mut h);
        h.finish()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            spec: self.spec.clone(),
            tensors: self
                .spec
                .layout()
                .into_iter()
                .map(|slot| NamedTensor {
                    name: slot.name.to_string(),
                    values: self.params[slot.offset..slot.offset + slot.len()].to_vec(),
                    shape: slot.shape,
                })
                .collect(),
        }
    }

    /// Rebuilds parameters from a checkpoint. Optimizer state and owned data
    /// are not part of a checkpoint and start empty.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut state = Self::zeros(ck.spec.clone())?;
        let layout = state.spec.layout();
        if layout.len() != ck.tensors.len() {
            return Err(Error::invalid("checkpoint tensor count does not match model"));
        }
        for (slot, t) in layout.iter().zip(&ck.tensors) {
            if slot.name != t.name || slot.shape != t.shape || t.values.len() != slot.len() {
                return Err(Error::invalid(format!("checkpoint tensor {:?} does not match model", t.name)));
            }
            state.params[slot.offset..slot.offset + slot.len()].copy_from_slice(&t.values);
        }
        Ok(state)
    }
}

impl Classifier for ModelState {
    fn predict_label(&self, x: &[f64]) -> Result<usize> {
        ModelState::predict_label(self, x)
    }
}

/// One parameter tensor in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// JSON checkpoint: `{"spec": {...}, "tensors": [{"name", "shape", "values"}]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub tensors: Vec<NamedTensor>,
}
