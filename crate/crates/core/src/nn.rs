//! One-hidden-layer ReLU network with a softmax head.
//!
//! Gradients are computed by hand-written backpropagation. Training uses Adam
//! with bias correction, label smoothing, a reduce-on-plateau learning-rate
//! schedule and best-validation checkpointing; outlier-exposure training adds
//! a cross-entropy-to-uniform term on auxiliary OOD inputs.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{FeatureVector, LabeledSample, OodPool, ProbVector, SplitDataset};
use crate::error::{Error, Result};
use crate::persist::{self, LineReader};

/// Floor applied to probabilities inside every logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

const FORMAT_HEADER: &str = "oodkit-softmax-classifier";
const FORMAT_VERSION: u32 = 1;
/// Training stops once the learning rate falls below this fraction of its start value.
const MIN_LR_FRACTION: f64 = 1e-6;
/// Offset mixed into the training seed for the OOD-batch sampling stream, so
/// that the in-distribution shuffling order does not depend on the OOD pool.
const OE_STREAM: u64 = 0x6f65_5f70_6f6f_6c00;

fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits
        .iter()
        .map(|z| ((z - max) / temperature).exp())
        .collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Cross-entropy `-sum_k q_k ln p_k` with the log floor.
pub fn cross_entropy(target: &[f64], p: &ProbVector) -> f64 {
    -target
        .iter()
        .zip(p.as_slice())
        .filter(|(q, _)| **q > 0.0)
        .map(|(q, pk)| q * pk.max(LOG_FLOOR).ln())
        .sum::<f64>()
}

pub fn smoothed_target(n_classes: usize, class: usize, alpha: f64) -> Vec<f64> {
    let mut q = vec![alpha / n_classes as f64; n_classes];
    q[class] += 1.0 - alpha;
    q
}

/// Label-smoothed cross-entropy with target `(1 - alpha) * onehot(y) + alpha / M`.
pub fn smoothed_cross_entropy(p: &ProbVector, class: usize, alpha: f64) -> f64 {
    cross_entropy(&smoothed_target(p.n_classes(), class, alpha), p)
}

/// Cross-entropy of `p` against the uniform distribution, `-(1/M) sum_k ln p_k`.
pub fn oe_uniform_term(p: &ProbVector) -> f64 {
    let m = p.n_classes();
    cross_entropy(&vec![1.0 / m as f64; m], p)
}

/// `sign(x)` with `sign(0) = 0`.
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxClassifier {
    input_dim: usize,
    hidden_dim: usize,
    n_classes: usize,
    /// Flat parameter vector: hidden weights (row-major, `hidden x input`),
    /// hidden bias, output weights (row-major, `classes x hidden`), output bias.
    params: Vec<f64>,
    temperature: f64,
}

struct Activations {
    pre: Vec<f64>,
    hidden: Vec<f64>,
    logits: Vec<f64>,
}

impl SoftmaxClassifier {
    pub fn zeros(input_dim: usize, hidden_dim: usize, n_classes: usize) -> Result<Self> {
        if input_dim == 0 || hidden_dim == 0 || n_classes < 2 {
            return Err(Error::Config(format!(
                "invalid layer sizes [{input_dim}, {hidden_dim}, {n_classes}]"
            )));
        }
        let n = hidden_dim * input_dim + hidden_dim + n_classes * hidden_dim + n_classes;
        Ok(SoftmaxClassifier {
            input_dim,
            hidden_dim,
            n_classes,
            params: vec![0.0; n],
            temperature: 1.0,
        })
    }

    /// He-uniform hidden weights, Glorot-uniform output weights, zero biases.
    pub fn init(input_dim: usize, hidden_dim: usize, n_classes: usize, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(input_dim, hidden_dim, n_classes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let he = (6.0 / input_dim as f64).sqrt();
        let glorot = (6.0 / (hidden_dim + n_classes) as f64).sqrt();
        let (w1, w2) = (model.w1_range(), model.w2_range());
        for w in &mut model.params[w1] {
            *w = rng.random_range(-he..he);
        }
        for w in &mut model.params[w2] {
            *w = rng.random_range(-glorot..glorot);
        }
        Ok(model)
    }

    pub fn from_params(
        input_dim: usize,
        hidden_dim: usize,
        n_classes: usize,
        params: Vec<f64>,
    ) -> Result<Self> {
        let mut model = Self::zeros(input_dim, hidden_dim, n_classes)?;
        if params.len() != model.params.len() {
            return Err(Error::Dimension {
                expected: model.params.len(),
                found: params.len(),
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Config("non-finite model parameter".into()));
        }
        model.params = params;
        Ok(model)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Temperature used by [`SoftmaxClassifier::predict`].
    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn set_temperature(&mut self, temperature: f64) -> Result<()> {
        check_temperature(temperature)?;
        self.temperature = temperature;
        Ok(())
    }

    fn w1_range(&self) -> std::ops::Range<usize> {
        0..self.hidden_dim * self.input_dim
    }

    fn b1_range(&self) -> std::ops::Range<usize> {
        let start = self.hidden_dim * self.input_dim;
        start..start + self.hidden_dim
    }

    fn w2_range(&self) -> std::ops::Range<usize> {
        let start = self.b1_range().end;
        start..start + self.n_classes * self.hidden_dim
    }

    fn b2_range(&self) -> std::ops::Range<usize> {
        let start = self.w2_range().end;
        start..start + self.n_classes
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::Dimension {
                expected: self.input_dim,
                found: x.len(),
            });
        }
        Ok(())
    }

    fn activations(&self, x: &[f64]) -> Activations {
        let (d, h) = (self.input_dim, self.hidden_dim);
        let w1 = &self.params[self.w1_range()];
        let b1 = &self.params[self.b1_range()];
        let w2 = &self.params[self.w2_range()];
        let b2 = &self.params[self.b2_range()];
        let pre: Vec<f64> = (0..h)
            .map(|j| b1[j] + w1[j * d..(j + 1) * d].iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>())
            .collect();
        let hidden: Vec<f64> = pre.iter().map(|a| a.max(0.0)).collect();
        let logits = (0..self.n_classes)
            .map(|k| {
                b2[k] + w2[k * h..(k + 1) * h]
                    .iter()
                    .zip(&hidden)
                    .map(|(w, a)| w * a)
                    .sum::<f64>()
            })
            .collect();
        Activations {
            pre,
            hidden,
            logits,
        }
    }

    /// Backpropagates `d loss / d logits`, accumulating parameter gradients
    /// scaled by `scale` into `grad`, and returns `d loss / d x`.
    fn backward(
        &self,
        x: &[f64],
        act: &Activations,
        dlogits: &[f64],
        scale: f64,
        grad: Option<&mut [f64]>,
    ) -> Vec<f64> {
        let (d, h) = (self.input_dim, self.hidden_dim);
        let w1 = &self.params[self.w1_range()];
        let w2 = &self.params[self.w2_range()];
        let mut dpre = vec![0.0; h];
        for (k, &dz) in dlogits.iter().enumerate() {
            for j in 0..h {
                dpre[j] += w2[k * h + j] * dz;
            }
        }
        for (dp, a) in dpre.iter_mut().zip(&act.pre) {
            if *a <= 0.0 {
                *dp = 0.0;
            }
        }
        if let Some(grad) = grad {
            let (w1r, b1r, w2r, b2r) = (self.w1_range(), self.b1_range(), self.w2_range(), self.b2_range());
            for j in 0..h {
                for i in 0..d {
                    grad[w1r.start + j * d + i] += scale * dpre[j] * x[i];
                }
                grad[b1r.start + j] += scale * dpre[j];
            }
            for (k, &dz) in dlogits.iter().enumerate() {
                for j in 0..h {
                    grad[w2r.start + k * h + j] += scale * dz * act.hidden[j];
                }
                grad[b2r.start + k] += scale * dz;
            }
        }
        (0..d)
            .map(|i| (0..h).map(|j| w1[j * d + i] * dpre[j]).sum())
            .collect()
    }

    pub fn logits(&self, x: &FeatureVector) -> Result<Vec<f64>> {
        self.check_input(x.as_slice())?;
        Ok(self.activations(x.as_slice()).logits)
    }

    /// `softmax(logits / temperature)`.
    pub fn forward(&self, x: &FeatureVector, temperature: f64) -> Result<ProbVector> {
        check_temperature(temperature)?;
        let logits = self.logits(x)?;
        ProbVector::new(softmax(&logits, temperature))
    }

    /// Forward pass at the model's own temperature.
    pub fn predict(&self, x: &FeatureVector) -> Result<ProbVector> {
        self.forward(x, self.temperature)
    }

    /// Exact gradient of `ln softmax(logits)_class` (temperature 1) with respect to the input.
    pub fn input_gradient(&self, x: &FeatureVector, class: usize) -> Result<FeatureVector> {
        self.check_input(x.as_slice())?;
        if class >= self.n_classes {
            return Err(Error::Config(format!(
                "class {class} out of range for {} classes",
                self.n_classes
            )));
        }
        let act = self.activations(x.as_slice());
        let p = softmax(&act.logits, 1.0);
        let dlogits: Vec<f64> = p
            .iter()
            .enumerate()
            .map(|(k, pk)| if k == class { 1.0 - pk } else { -pk })
            .collect();
        FeatureVector::new(self.backward(x.as_slice(), &act, &dlogits, 1.0, None))
    }

    /// One signed-gradient step that raises the confidence of the predicted
    /// class: `x - eps * sign(-grad ln p_yhat)` with `yhat` from temperature 1.
    pub fn perturb_odin(&self, x: &FeatureVector, epsilon: f64) -> Result<FeatureVector> {
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return Err(Error::Config(format!("ODIN epsilon must be >= 0, got {epsilon}")));
        }
        let predicted = self.forward(x, 1.0)?.argmax();
        let grad = self.input_gradient(x, predicted)?;
        FeatureVector::new(
            x.as_slice()
                .iter()
                .zip(grad.as_slice())
                .map(|(xi, g)| xi - epsilon * sign(-g))
                .collect(),
        )
    }

    /// Cross-entropy against an arbitrary target distribution (temperature 1),
    /// accumulating `scale * d loss / d params` into `grad`.
    pub fn accumulate_loss_gradient(
        &self,
        x: &FeatureVector,
        target: &[f64],
        scale: f64,
        grad: &mut [f64],
    ) -> Result<f64> {
        self.check_input(x.as_slice())?;
        if target.len() != self.n_classes {
            return Err(Error::Dimension {
                expected: self.n_classes,
                found: target.len(),
            });
        }
        let act = self.activations(x.as_slice());
        let p = ProbVector::new(softmax(&act.logits, 1.0))?;
        let loss = cross_entropy(target, &p);
        let dlogits: Vec<f64> = p.as_slice().iter().zip(target).map(|(pk, q)| pk - q).collect();
        self.backward(x.as_slice(), &act, &dlogits, scale, Some(grad));
        Ok(loss)
    }

    /// Mean label-smoothed cross-entropy over `samples`.
    pub fn mean_smoothed_loss(&self, samples: &[LabeledSample], alpha: f64) -> Result<f64> {
        let mut total = 0.0;
        for s in samples {
            total += smoothed_cross_entropy(&self.forward(&s.features, 1.0)?, s.label, alpha);
        }
        Ok(total / samples.len().max(1) as f64)
    }

    pub fn accuracy(&self, samples: &[LabeledSample]) -> Result<f64> {
        let mut correct = 0usize;
        for s in samples {
            if self.forward(&s.features, 1.0)?.argmax() == s.label {
                correct += 1;
            }
        }
        Ok(correct as f64 / samples.len().max(1) as f64)
    }

    /// Training objective for one batch:
    /// `mean smoothed CE(in_batch) + oe_weight * mean CE(ood_batch, uniform)`.
    /// Returns the loss and its gradient with respect to the flat parameters.
    pub fn batch_objective(
        &self,
        in_batch: &[&LabeledSample],
        ood_batch: &[&FeatureVector],
        label_smoothing: f64,
        oe_weight: f64,
    ) -> Result<(f64, Vec<f64>)> {
        let mut grad = vec![0.0; self.params.len()];
        let mut loss = 0.0;
        if !in_batch.is_empty() {
            let scale = 1.0 / in_batch.len() as f64;
            for s in in_batch {
                if s.label >= self.n_classes {
                    return Err(Error::Config(format!("label {} out of range", s.label)));
                }
                let q = smoothed_target(self.n_classes, s.label, label_smoothing);
                loss += scale * self.accumulate_loss_gradient(&s.features, &q, scale, &mut grad)?;
            }
        }
        if oe_weight != 0.0 && !ood_batch.is_empty() {
            let uniform = vec![1.0 / self.n_classes as f64; self.n_classes];
            let scale = oe_weight / ood_batch.len() as f64;
            for x in ood_batch {
                loss += scale * self.accumulate_loss_gradient(x, &uniform, scale, &mut grad)?;
            }
        }
        Ok((loss, grad))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        persist::push_line(&mut out, FORMAT_HEADER, [format!("v{FORMAT_VERSION}")]);
        persist::push_line(&mut out, "layers", [self.input_dim, self.hidden_dim, self.n_classes]);
        persist::push_floats(&mut out, "temperature", &[self.temperature]);
        let (d, h) = (self.input_dim, self.hidden_dim);
        for row in self.params[self.w1_range()].chunks(d) {
            persist::push_floats(&mut out, "hidden_weight", row);
        }
        persist::push_floats(&mut out, "hidden_bias", &self.params[self.b1_range()]);
        for row in self.params[self.w2_range()].chunks(h) {
            persist::push_floats(&mut out, "output_weight", row);
        }
        persist::push_floats(&mut out, "output_bias", &self.params[self.b2_range()]);
        out
    }

    pub fn from_text(text: &str, source: &str) -> Result<Self> {
        let mut r = LineReader::new(text, source);
        Self::read(&mut r)
    }

    pub(crate) fn read(r: &mut LineReader<'_>) -> Result<Self> {
        let version = r.expect(FORMAT_HEADER)?;
        if version != [format!("v{FORMAT_VERSION}").as_str()] {
            return Err(r.error(format!("unsupported version {version:?}")));
        }
        let sizes = r.expect("layers")?;
        if sizes.len() != 3 {
            return Err(r.error("`layers` needs 3 sizes"));
        }
        let d: usize = r.parse(sizes[0])?;
        let h: usize = r.parse(sizes[1])?;
        let m: usize = r.parse(sizes[2])?;
        let temperature = r.expect_floats("temperature", 1)?[0];
        let mut params = Vec::new();
        for _ in 0..h {
            params.extend(r.expect_floats("hidden_weight", d)?);
        }
        params.extend(r.expect_floats("hidden_bias", h)?);
        for _ in 0..m {
            params.extend(r.expect_floats("output_weight", h)?);
        }
        params.extend(r.expect_floats("output_bias", m)?);
        let mut model = Self::from_params(d, h, m, params).map_err(|e| r.error(e.to_string()))?;
        model.set_temperature(temperature).map_err(|e| r.error(e.to_string()))?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        persist::write_file(path.as_ref(), &self.to_text())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_text(&persist::read_file(path)?, &path.display().to_string())
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("temperature must be positive, got {t}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub hidden_units: usize,
    pub learning_rate: f64,
    pub label_smoothing: f64,
    /// Epochs without validation improvement before the learning rate decays.
    pub patience: usize,
    pub lr_decay: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    /// Weight of the uniform cross-entropy term in outlier-exposure training.
    pub oe_weight: f64,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden_units: 32,
            learning_rate: 0.01,
            label_smoothing: 0.2,
            patience: 3,
            lr_decay: 0.6,
            max_epochs: 60,
            batch_size: 32,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            oe_weight: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(what.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be > 0");
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad("label_smoothing must be in [0, 1)");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay < 1.0) {
            return bad("lr_decay must be in (0, 1)");
        }
        if !(self.oe_weight >= 0.0 && self.oe_weight.is_finite()) {
            return bad("oe_weight must be >= 0");
        }
        if self.batch_size == 0 || self.hidden_units == 0 {
            return bad("batch_size and hidden_units must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must be in [0, 1)");
        }
        if self.adam_epsilon.is_nan() || self.adam_epsilon <= 0.0 {
            return bad("adam_epsilon must be > 0");
        }
        Ok(())
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n_params: usize, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Adam {
            beta1,
            beta2,
            epsilon,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], learning_rate: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 0 is the untrained model.
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: SoftmaxClassifier,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

/// Trains on `data.train` with label-smoothed cross-entropy and returns the
/// parameters with the lowest validation loss.
pub fn train(model: SoftmaxClassifier, data: &SplitDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    fit(model, data, None, cfg)
}

/// Outlier-exposure training: every batch adds `oe_weight` times the mean
/// uniform cross-entropy over an equally sized batch drawn from `pool`.
pub fn train_with_oe(
    model: SoftmaxClassifier,
    data: &SplitDataset,
    pool: &OodPool,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    fit(model, data, Some(pool), cfg)
}

fn fit(
    mut model: SoftmaxClassifier,
    data: &SplitDataset,
    pool: Option<&OodPool>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() || data.validation.is_empty() {
        return Err(Error::Config("training needs non-empty train and validation splits".into()));
    }
    if data.feature_dim() != model.input_dim || data.n_classes != model.n_classes {
        return Err(Error::Dimension {
            expected: model.input_dim,
            found: data.feature_dim(),
        });
    }
    if let Some(pool) = pool {
        if pool.feature_dim() != model.input_dim {
            return Err(Error::Dimension {
                expected: model.input_dim,
                found: pool.feature_dim(),
            });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut ood_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ OE_STREAM);
    let mut ood_order: Vec<usize> = Vec::new();
    let mut ood_cursor = 0;
    let use_ood = pool.is_some() && cfg.oe_weight != 0.0;

    let mut adam = Adam::new(model.params.len(), cfg.beta1, cfg.beta2, cfg.adam_epsilon);
    let mut lr = cfg.learning_rate;
    let alpha = cfg.label_smoothing;

    let initial_val = model.mean_smoothed_loss(&data.validation, alpha)?;
    let initial_train = model.mean_smoothed_loss(&data.train, alpha)?;
    let mut history = vec![EpochRecord {
        epoch: 0,
        train_loss: initial_train,
        validation_loss: initial_val,
        learning_rate: lr,
    }];
    let mut best = (initial_val, model.clone(), 0);
    let mut stale = 0;
    let mut order: Vec<usize> = (0..data.train.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut n_batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let in_batch: Vec<&LabeledSample> = chunk.iter().map(|&i| &data.train[i]).collect();
            let ood_batch: Vec<&FeatureVector> = match pool {
                Some(pool) if use_ood => (0..chunk.len())
                    .map(|_| {
                        if ood_cursor == ood_order.len() {
                            ood_order = (0..pool.samples.len()).collect();
                            ood_order.shuffle(&mut ood_rng);
                            ood_cursor = 0;
                        }
                        ood_cursor += 1;
                        &pool.samples[ood_order[ood_cursor - 1]]
                    })
                    .collect(),
                _ => Vec::new(),
            };
            let (loss, grad) = model.batch_objective(&in_batch, &ood_batch, alpha, cfg.oe_weight)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Training {
                    epoch,
                    message: format!("non-finite batch loss {loss}"),
                });
            }
            adam.step(&mut model.params, &grad, lr);
            if model.params.iter().any(|p| !p.is_finite()) {
                return Err(Error::Training {
                    epoch,
                    message: "non-finite parameters after update".into(),
                });
            }
            epoch_loss += loss;
            n_batches += 1;
        }

        let val = model.mean_smoothed_loss(&data.validation, alpha)?;
        if !val.is_finite() {
            return Err(Error::Training {
                epoch,
                message: format!("non-finite validation loss {val}"),
            });
        }
        history.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / n_batches as f64,
            validation_loss: val,
            learning_rate: lr,
        });
        if val < best.0 {
            best = (val, model.clone(), epoch);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                lr *= cfg.lr_decay;
                stale = 0;
            }
        }
        if lr < MIN_LR_FRACTION * cfg.learning_rate {
            break;
        }
    }

    let (_, model, best_epoch) = best;
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
    })
}
