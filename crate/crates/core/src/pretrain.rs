//! Self-supervised pre-training with a contrastive (NT-Xent) objective.
//! The stage sees item values only; labels are not part of its input.

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::{Checkpoint, Stage};
use crate::dataio::UnlabeledItems;
use crate::episodes::episode_rng;
use crate::tensor::{adam_step, AdamConfig, AdamState, Tape, Tensor, Var, NORMALIZE_EPSILON};
use crate::{Error, Result};

/// Stand-in for minus infinity on the similarity diagonal; finite so the
/// backward pass never sees `inf - inf`.
const SELF_SIMILARITY_FILL: f64 = -1e30;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentPolicy {
    /// Gaussian jitter as a fraction of each coordinate's standard deviation.
    pub jitter_sigma: f64,
    pub coordinate_dropout_p: f64,
    pub crop_padding: usize,
    pub flip_p: f64,
    pub pixel_noise_sigma: f64,
    /// Probability that the transform chain runs at all.
    pub apply_probability: f64,
    pub seed: u64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            jitter_sigma: 0.1,
            coordinate_dropout_p: 0.1,
            crop_padding: 4,
            flip_p: 0.5,
            pixel_noise_sigma: 0.05,
            apply_probability: 0.9,
            seed: 0,
        }
    }
}

impl AugmentPolicy {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("coordinate_dropout_p", self.coordinate_dropout_p),
            ("flip_p", self.flip_p),
            ("apply_probability", self.apply_probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("augment: {name} = {p} outside [0, 1]")));
            }
        }
        for (name, s) in [("jitter_sigma", self.jitter_sigma), ("pixel_noise_sigma", self.pixel_noise_sigma)] {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("augment: {name} = {s} must be >= 0")));
            }
        }
        Ok(())
    }
}

/// Mirrors every row of a `[c, h, w]` image.
pub fn flip_horizontal(item: &[f64], shape: &[usize]) -> Vec<f64> {
    let w = shape[2];
    item.chunks(w).flat_map(|row| row.iter().rev().copied()).collect()
}

/// Zero-pads by `pad` on every side and crops back to `h x w` at offset `(dy, dx)`.
fn pad_crop(item: &[f64], shape: &[usize], pad: usize, dy: usize, dx: usize) -> Vec<f64> {
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut out = vec![0.0; item.len()];
    for ch in 0..c {
        for y in 0..h {
            let sy = (y + dy).wrapping_sub(pad);
            if sy >= h {
                continue;
            }
            for x in 0..w {
                let sx = (x + dx).wrapping_sub(pad);
                if sx < w {
                    out[(ch * h + y) * w + x] = item[(ch * h + sy) * w + sx];
                }
            }
        }
    }
    out
}

/// Runs the full transform chain once. Vectors (rank-1 items) get jitter
/// scaled by `feature_std` and coordinate dropout; images (`[c, h, w]`) get
/// pad-and-crop, a horizontal flip, pixel noise and clamping to `[0, 1]`.
pub fn transform_item<R: Rng>(item: &[f64], shape: &[usize], policy: &AugmentPolicy, feature_std: &[f64], rng: &mut R) -> Vec<f64> {
    if shape.len() == 3 {
        let mut x = item.to_vec();
        if policy.crop_padding > 0 {
            let span = 2 * policy.crop_padding;
            let (dy, dx) = (rng.random_range(0..=span), rng.random_range(0..=span));
            x = pad_crop(&x, shape, policy.crop_padding, dy, dx);
        }
        if rng.random_bool(policy.flip_p) {
            x = flip_horizontal(&x, shape);
        }
        if policy.pixel_noise_sigma > 0.0 {
            let noise = Normal::new(0.0, policy.pixel_noise_sigma).expect("validated sigma");
            x.iter_mut().for_each(|v| *v += noise.sample(rng));
        }
        x.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        return x;
    }
    item.iter()
        .zip(feature_std)
        .map(|(&v, &s)| {
            let mut out = v;
            let sd = policy.jitter_sigma * s;
            if sd > 0.0 {
                out += sd * rng.sample::<f64, _>(rand_distr::StandardNormal);
            }
            if policy.coordinate_dropout_p > 0.0 && rng.random_bool(policy.coordinate_dropout_p) {
                out = 0.0;
            }
            out
        })
        .collect()
}

/// With probability `apply_probability` a transformed copy, otherwise the item itself.
pub fn augment_view<R: Rng>(item: &[f64], shape: &[usize], policy: &AugmentPolicy, feature_std: &[f64], rng: &mut R) -> Vec<f64> {
    if rng.random_bool(policy.apply_probability) {
        transform_item(item, shape, policy, feature_std, rng)
    } else {
        item.to_vec()
    }
}

/// One `apply_probability` draw for the whole `[n, ...]` batch; when it
/// succeeds every item is transformed independently.
pub fn augment_batch<R: Rng>(batch: &Tensor, policy: &AugmentPolicy, feature_std: &[f64], rng: &mut R) -> Tensor {
    if !rng.random_bool(policy.apply_probability) {
        return batch.clone();
    }
    let shape = &batch.shape()[1..];
    let len: usize = shape.iter().product();
    let data = batch
        .data()
        .chunks(len)
        .flat_map(|item| transform_item(item, shape, policy, feature_std, rng))
        .collect();
    Tensor::new(batch.shape().to_vec(), data).expect("shape preserved")
}

/// Normalised-temperature cross-entropy over `2B` anchors: each view's
/// positive is the other view of the same item, the other `2B - 2` views are
/// negatives.
pub fn ntxent_loss(tape: &mut Tape, view_a: Var, view_b: Var, tau: f64) -> Result<Var> {
    let b = tape.shape(view_a)[0];
    if b < 2 {
        return Err(Error::Config(format!("contrastive batch of {b} has no negatives")));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!("contrastive temperature {tau} must be positive")));
    }
    let z = tape.concat_rows(&[view_a, view_b])?;
    let z = tape.l2_normalize(z, NORMALIZE_EPSILON)?;
    let zt = tape.transpose(z)?;
    let sim = tape.matmul(z, zt)?;
    let sim = tape.scale(sim, 1.0 / tau);
    let sim = tape.fill_diagonal(sim, SELF_SIMILARITY_FILL)?;
    let labels: Vec<usize> = (0..2 * b).map(|i| (i + b) % (2 * b)).collect();
    Ok(tape.softmax_cross_entropy(sim, &labels)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub temperature: f64,
    pub lr: f64,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            steps: 500,
            temperature: 0.5,
            lr: 1e-3,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!("pretrain: batch_size {} < 2", self.batch_size)));
        }
        if !(self.temperature > 0.0 && self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("pretrain: need temperature > 0 and lr >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub losses: Vec<f64>,
}

/// Adam at a fixed learning rate on the NT-Xent loss of two augmented views
/// of `batch_size` distinct items per step.
pub fn pretrain(init: &Checkpoint, items: &UnlabeledItems, cfg: &PretrainConfig, policy: &AugmentPolicy) -> Result<PretrainOutcome> {
    cfg.validate()?;
    policy.validate()?;
    if items.len() < cfg.batch_size {
        return Err(Error::Config(format!(
            "pretrain: {} items cannot fill a batch of {}",
            items.len(),
            cfg.batch_size
        )));
    }
    let mut backbone = init.clone_for_task();
    let std = items.feature_std();
    let shape = items.item_shape().to_vec();
    let mut state = AdamState::new(backbone.params(), cfg.adam);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut rng = episode_rng(cfg.seed, step as u64);
        let picked = sample(&mut rng, items.len(), cfg.batch_size);
        let mut a = Vec::new();
        let mut b = Vec::new();
        for i in picked {
            a.extend(augment_view(items.item(i), &shape, policy, &std, &mut rng));
            b.extend(augment_view(items.item(i), &shape, policy, &std, &mut rng));
        }
        let mut batch_shape = vec![cfg.batch_size];
        batch_shape.extend(&shape);
        let mut tape = Tape::new();
        let params = backbone.register(&mut tape, true);
        let xa = tape.constant(Tensor::new(batch_shape.clone(), a)?);
        let xb = tape.constant(Tensor::new(batch_shape, b)?);
        let ea = backbone.forward(&mut tape, &params, xa)?;
        let eb = backbone.forward(&mut tape, &params, xb)?;
        let loss = ntxent_loss(&mut tape, ea, eb, cfg.temperature)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                step,
                context: format!("pre-training, lr {}", cfg.lr),
            });
        }
        losses.push(value);
        tape.backward(loss)?;
        let grads: Vec<Tensor> = params.iter().map(|&p| tape.grad_or_zeros(p)).collect();
        adam_step(backbone.params_mut(), &grads, &mut state, cfg.lr)?;
    }
    Ok(PretrainOutcome {
        checkpoint: Checkpoint::new(backbone, Stage::Pretrained, init.config_digest.clone()),
        losses,
    })
}
