//! SGD with momentum, the warmup + cosine schedule, and the epoch loop.

use std::collections::HashMap;
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::centers::CenterMode;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::ConceptHash;
use crate::objective::{self, LossConfig, LossValues};
use crate::params::ParamStore;
use crate::synth::{augment_with, AugmentParams};
use crate::tensor::{Tape, Tensor};

const SHUFFLE_DOMAIN: u64 = 0x5348_5546;
const AUGMENT_DOMAIN: u64 = 0x4155_474d;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub seed: u64,
    /// Random flip + resized crop on every training image.
    pub augment: bool,
    /// Rescales the gradient when its global L2 norm exceeds this value.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            lr: 0.001,
            momentum: 0.9,
            weight_decay: 1e-4,
            warmup_epochs: 10,
            seed: 0,
            augment: true,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    /// Short, clipped, higher-rate schedule for training the desk encoder
    /// from scratch in a few minutes.
    pub fn desk() -> Self {
        Self {
            epochs: 30,
            lr: 0.05,
            warmup_epochs: 2,
            augment: false,
            grad_clip: Some(1.0),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if self.warmup_epochs > self.epochs {
            return Err(Error::config(
                "train.warmup_epochs",
                format!("{} exceeds epochs = {}", self.warmup_epochs, self.epochs),
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr", "must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("train.momentum", "must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config(
                "train.weight_decay",
                "must be finite and non-negative",
            ));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::config("train.grad_clip", "must be positive and finite"));
            }
        }
        Ok(())
    }
}

/// Scales all gradients by `max_norm / ‖g‖` when the global norm exceeds
/// `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Learning rate at a (possibly fractional) epoch: linear ramp from 0 over
/// the warmup, then half-cosine decay towards 0 at `epochs`.
pub fn cosine_lr_with_warmup(epoch: f64, cfg: &TrainConfig) -> f64 {
    let warmup = cfg.warmup_epochs as f64;
    if epoch < warmup {
        return cfg.lr * epoch / warmup;
    }
    let span = cfg.epochs as f64 - warmup;
    if span <= 0.0 {
        return cfg.lr;
    }
    cfg.lr * 0.5 * (1.0 + (PI * (epoch - warmup) / span).cos())
}

/// `v ← μ·v + (g + wd·p)`, `p ← p − lr·v`, elementwise.
pub fn sgd_momentum_step(
    params: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + (g + weight_decay * *p);
        *p -= lr * *v;
    }
}

/// Momentum SGD with one zero-initialized velocity buffer per parameter.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: HashMap<String, Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: HashMap::new(),
        }
    }

    /// Updates every trainable parameter that received a gradient; `grads`
    /// is in store order.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (p, g) in params.iter_mut().zip(grads) {
            let Some(g) = g else { continue };
            if !p.trainable {
                continue;
            }
            if g.shape() != p.value.shape() {
                return Err(Error::shape(format!(
                    "gradient {:?} for parameter {} {:?}",
                    g.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            let v = self
                .velocity
                .entry(p.name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            sgd_momentum_step(
                p.value.data_mut(),
                g.data(),
                v.data_mut(),
                lr,
                self.momentum,
                self.weight_decay,
            );
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Learning rate at the first step of the epoch.
    pub lr: f64,
    pub steps: usize,
    pub composition: String,
    pub center_mode: CenterMode,
    /// Sample-weighted means over the epoch.
    pub loss: LossValues,
}

fn stream_rng(seed: u64, domain: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ domain);
    rng.set_stream(stream);
    rng
}

/// Checks the dataset against the model before anything is updated.
pub fn check_compatible(model: &ConceptHash, data: &Dataset) -> Result<()> {
    let enc = &model.config.encoder;
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if data.image_size != enc.image_size || data.channels != enc.channels {
        return Err(Error::Data(format!(
            "dataset images are {}×{}×{}, model expects {}×{}×{}",
            data.channels, data.image_size, data.image_size, enc.channels, enc.image_size, enc.image_size
        )));
    }
    if let Some(s) = data.samples.iter().find(|s| s.label >= model.config.num_classes) {
        return Err(Error::Data(format!(
            "label {} outside the model's {} classes",
            s.label, model.config.num_classes
        )));
    }
    let pixels = data.pixels_per_image();
    if let Some(i) = data.samples.iter().position(|s| s.image.len() != pixels) {
        return Err(Error::Data(format!("image {i} has the wrong number of pixels")));
    }
    Ok(())
}

fn batch_images(data: &Dataset, indices: &[usize], epoch: usize, cfg: &TrainConfig) -> Result<Tensor> {
    if !cfg.augment {
        return data.batch(indices);
    }
    let (c, size) = (data.channels, data.image_size);
    let mut pixels = Vec::with_capacity(indices.len() * data.pixels_per_image());
    for &i in indices {
        let stream = ((epoch as u64) << 32) | i as u64;
        let params = AugmentParams::sample(&mut stream_rng(cfg.seed, AUGMENT_DOMAIN, stream), size);
        let (img, _) = augment_with(&data.samples[i].image, &[], c, size, &params);
        pixels.extend(img);
    }
    Tensor::new(&[indices.len(), c, size, size], pixels)
}

/// One seeded-shuffled pass over `data` with a step per batch.
pub fn train_epoch(
    model: &mut ConceptHash,
    sgd: &mut Sgd,
    data: &Dataset,
    epoch: usize,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
) -> Result<EpochMetrics> {
    cfg.validate()?;
    loss_cfg.validate()?;
    check_compatible(model, data)?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut stream_rng(cfg.seed, SHUFFLE_DOMAIN, epoch as u64));
    let steps = data.len().div_ceil(cfg.batch_size);
    let mut sums = LossValues::default();
    let mut first_lr = None;
    for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
        let lr = cosine_lr_with_warmup(epoch as f64 + step as f64 / steps as f64, cfg);
        first_lr.get_or_insert(lr);
        let images = batch_images(data, idx, epoch, cfg)?;
        let labels: Vec<usize> = idx.iter().map(|&i| data.samples[i].label).collect();
        let mut tape = Tape::new();
        let binding = model.params.bind(&mut tape);
        let out = model.loss(&mut tape, &binding, &images, &labels, loss_cfg)?;
        let values = objective::loss_values(&tape, &out.terms, out.total);
        if !values.total.is_finite() {
            return Err(Error::Contract(format!(
                "non-finite loss at epoch {epoch}, step {step}"
            )));
        }
        tape.backward(out.total)?;
        let mut grads = binding.gradients(&tape);
        if let Some(max_norm) = cfg.grad_clip {
            clip_grad_norm(&mut grads, max_norm);
        }
        sgd.step(&mut model.params, &grads, lr)?;
        let w = idx.len() as f64;
        sums.total += w * values.total;
        sums.clf += w * values.clf;
        sums.quan += w * values.quan;
        sums.csd += w * values.csd;
        sums.cd += w * values.cd;
    }
    let n = data.len() as f64;
    Ok(EpochMetrics {
        epoch,
        lr: first_lr.unwrap_or(0.0),
        steps,
        composition: loss_cfg.composition(),
        center_mode: model.config.center_mode,
        loss: LossValues {
            total: sums.total / n,
            clf: sums.clf / n,
            quan: sums.quan / n,
            csd: sums.csd / n,
            cd: sums.cd / n,
        },
    })
}

/// Full schedule; `on_epoch` sees the metrics and the model after every epoch.
pub fn train(
    model: &mut ConceptHash,
    data: &Dataset,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    mut on_epoch: impl FnMut(&EpochMetrics, &ConceptHash) -> Result<()>,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    loss_cfg.validate()?;
    check_compatible(model, data)?;
    let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let metrics = train_epoch(model, &mut sgd, data, epoch, cfg, loss_cfg)?;
        on_epoch(&metrics, model)?;
        history.push(metrics);
    }
    Ok(history)
}
