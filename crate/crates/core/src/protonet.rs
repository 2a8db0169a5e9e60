//! Prototype classifier and episodic meta-training.
//!
//! Class probabilities are a softmax over temperature-scaled cosine
//! similarities between a query embedding and the class prototypes, each
//! prototype being the mean support embedding of its class.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, BackboneSpec, Checkpoint, Stage};
use crate::dataio::Dataset;
use crate::episodes::{episode_rng, sample_episode, Episode, SamplerConfig};
use crate::tensor::{
    adam_step, grad_check, margin_at, AdamConfig, AdamState, OpCheck, Tape, Tensor, TensorError, Var, GRAD_CHECK_STEP,
    KINK_MARGIN, NORMALIZE_EPSILON,
};
use crate::{Error, Result};

/// Seed offset separating the fixed validation episodes from training episodes.
const VALIDATION_SEED_SALT: u64 = 0x5641_4c5f_4550_4953;

/// Class centroids, one row per episode label.
#[derive(Clone, Debug, PartialEq)]
pub struct Prototypes {
    pub matrix: Tensor,
}

impl Prototypes {
    pub fn way(&self) -> usize {
        self.matrix.shape()[0]
    }
}

fn class_rows(labels: &[usize]) -> Result<Vec<Vec<usize>>> {
    let way = labels.iter().max().map_or(0, |m| m + 1);
    let mut rows = vec![Vec::new(); way];
    for (i, &l) in labels.iter().enumerate() {
        rows[l].push(i);
    }
    if let Some(k) = rows.iter().position(Vec::is_empty) {
        return Err(Error::Config(format!("class {k} has no support items")));
    }
    if rows.is_empty() {
        return Err(Error::Config("no support items".into()));
    }
    Ok(rows)
}

/// Differentiable prototypes: row `k` is the mean of the rows of `emb`
/// labelled `k`.
pub fn prototypes_on_tape(tape: &mut Tape, emb: Var, labels: &[usize]) -> Result<Var> {
    if tape.shape(emb).first() != Some(&labels.len()) {
        return Err(Error::Config(format!(
            "{} labels for embeddings of shape {:?}",
            labels.len(),
            tape.shape(emb)
        )));
    }
    let mut means = Vec::new();
    for rows in class_rows(labels)? {
        let members = tape.gather_rows(emb, &rows)?;
        means.push(tape.mean_rows(members)?);
    }
    Ok(tape.concat_rows(&means)?)
}

pub fn compute_prototypes(embeddings: &Tensor, labels: &[usize]) -> Result<Prototypes> {
    let mut tape = Tape::new();
    let emb = tape.constant(embeddings.clone());
    let p = prototypes_on_tape(&mut tape, emb, labels)?;
    Ok(Prototypes {
        matrix: tape.value(p).clone(),
    })
}

/// `tau * cos(query_i, proto_k)` as a `[q, K]` tensor on the tape.
pub fn cosine_logits_on_tape(tape: &mut Tape, query: Var, protos: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!("temperature {tau} must be positive")));
    }
    let q = tape.l2_normalize(query, NORMALIZE_EPSILON)?;
    let p = tape.l2_normalize(protos, NORMALIZE_EPSILON)?;
    let pt = tape.transpose(p)?;
    let sim = tape.matmul(q, pt)?;
    Ok(tape.scale(sim, tau))
}

pub fn cosine_logits(query: &Tensor, protos: &Prototypes, tau: f64) -> Result<Tensor> {
    let mut tape = Tape::new();
    let q = tape.constant(query.clone());
    let p = tape.constant(protos.matrix.clone());
    let l = cosine_logits_on_tape(&mut tape, q, p, tau)?;
    Ok(tape.value(l).clone())
}

/// Row-wise softmax probabilities and argmax predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct Classification {
    pub probabilities: Tensor,
    pub predictions: Vec<usize>,
}

pub fn classify(logits: &Tensor) -> Classification {
    let k = logits.shape().get(1).copied().unwrap_or(1);
    let mut probs = Vec::with_capacity(logits.numel());
    let mut predictions = Vec::new();
    for row in logits.data().chunks(k) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exp.iter().sum();
        probs.extend(exp.iter().map(|e| e / z));
        predictions.push(argmax(row));
    }
    Classification {
        probabilities: Tensor::new(logits.shape().to_vec(), probs).expect("same shape"),
        predictions,
    }
}

/// First index of the maximum.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len().max(1) as f64
}

/// Query cross-entropy of one episode, recorded on `tape` against the
/// backbone parameters `params`.
pub fn episode_loss(tape: &mut Tape, backbone: &Backbone, params: &[Var], episode: &Episode, tau: f64) -> Result<Var> {
    let logits = query_logits_on_tape(tape, backbone, params, episode, tau)?;
    Ok(tape.softmax_cross_entropy(logits, &episode.query_labels)?)
}

fn query_logits_on_tape(tape: &mut Tape, backbone: &Backbone, params: &[Var], episode: &Episode, tau: f64) -> Result<Var> {
    let sx = tape.constant(episode.support.clone());
    let support = backbone.forward(tape, params, sx)?;
    let protos = prototypes_on_tape(tape, support, &episode.support_labels)?;
    let qx = tape.constant(episode.query.clone());
    let query = backbone.forward(tape, params, qx)?;
    cosine_logits_on_tape(tape, query, protos, tau)
}

/// Query logits of the plain prototype classifier.
pub fn readout(backbone: &Backbone, episode: &Episode, tau: f64) -> Result<Tensor> {
    let mut tape = Tape::new();
    let params = backbone.register(&mut tape, false);
    let logits = query_logits_on_tape(&mut tape, backbone, &params, episode, tau)?;
    Ok(tape.value(logits).clone())
}

pub fn readout_accuracy(backbone: &Backbone, episode: &Episode, tau: f64) -> Result<f64> {
    let logits = readout(backbone, episode, tau)?;
    Ok(accuracy(&classify(&logits).predictions, &episode.query_labels))
}

/// End-to-end gradient check of [`episode_loss`] with respect to every
/// backbone parameter, over `trials` random MLPs and episodes. Draws whose
/// hidden activations sit within [`KINK_MARGIN`] of zero are redrawn.
pub fn episode_loss_grad_check(trials: usize, seed: u64) -> Result<OpCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut check = OpCheck {
        name: "episode_loss".into(),
        trials,
        redrawn: 0,
        max_error: 0.0,
    };
    let to_tensor_err = |e: Error| TensorError::Invalid(e.to_string());
    for _ in 0..trials {
        let (bb, ep, tau) = loop {
            let (bb, ep, tau) = random_loss_instance(&mut rng)?;
            let f = |tape: &mut Tape, _: Var| {
                let params = bb.register(tape, false);
                episode_loss(tape, &bb, &params, &ep, tau).map_err(to_tensor_err)
            };
            // zero embeddings sit on the singular point of the normalisation
            let min_norm = [&ep.support, &ep.query]
                .into_iter()
                .map(|x| bb.embed(x).map(|e| (0..e.shape()[0]).map(|i| norm(e.row(i))).fold(f64::INFINITY, f64::min)))
                .collect::<std::result::Result<Vec<_>, _>>()?
                .into_iter()
                .fold(f64::INFINITY, f64::min);
            if min_norm > KINK_MARGIN && margin_at(&f, &Tensor::scalar(0.0))? > KINK_MARGIN {
                break (bb, ep, tau);
            }
            check.redrawn += 1;
            if check.redrawn > 50 * trials.max(1) {
                return Err(Error::Config("episode_loss grad check: no draw clear of kinks".into()));
            }
        };
        for p in 0..bb.params().len() {
            let err = grad_check(
                |tape, w| {
                    let mut params = bb.register(tape, false);
                    params[p] = w;
                    episode_loss(tape, &bb, &params, &ep, tau).map_err(to_tensor_err)
                },
                &bb.params()[p],
                GRAD_CHECK_STEP,
            )?;
            check.max_error = check.max_error.max(err);
        }
    }
    Ok(check)
}

fn norm(row: &[f64]) -> f64 {
    row.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn random_loss_instance(rng: &mut ChaCha8Rng) -> Result<(Backbone, Episode, f64)> {
    let d = rng.random_range(2..=5);
    let hidden = rng.random_range(2..=5);
    let m = rng.random_range(2..=4);
    let bb = Backbone::build(BackboneSpec::mlp(d, vec![hidden], m, rng.random()))?;
    let way = rng.random_range(2..=3);
    let shot = rng.random_range(1..=2);
    let q = rng.random_range(1..=2);
    let mut draw = |n: usize| -> Result<Tensor> {
        Ok(Tensor::new(vec![n, d], (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect())?)
    };
    let support = draw(way * shot)?;
    let query = draw(way * q)?;
    let support_labels: Vec<usize> = (0..way).flat_map(|c| std::iter::repeat_n(c, shot)).collect();
    let query_labels: Vec<usize> = (0..way).flat_map(|c| std::iter::repeat_n(c, q)).collect();
    let ep = Episode {
        domain_name: "grad-check".into(),
        way,
        shots: vec![shot; way],
        classes: (0..way).collect(),
        support_indices: (0..way * shot).collect(),
        support_labels,
        query_indices: (way * shot..way * (shot + q)).collect(),
        query_labels,
        support,
        query,
    };
    Ok((bb, ep, rng.random_range(1.0..5.0)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub lr_min: f64,
    pub lr_max: f64,
    pub warmup_epochs: usize,
    pub temperature: f64,
    pub patience: usize,
    pub val_episodes: usize,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            episodes_per_epoch: 2000,
            lr_min: 1e-6,
            lr_max: 5e-5,
            warmup_epochs: 5,
            temperature: 1.0,
            patience: 5,
            val_episodes: 200,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train: {m}")));
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr_max && self.lr_max.is_finite()) {
            return bad("need 0 <= lr_min <= lr_max");
        }
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return bad("warmup_epochs must be below epochs");
        }
        if self.episodes_per_epoch == 0 || self.val_episodes == 0 || self.patience == 0 {
            return bad("episodes_per_epoch, val_episodes and patience must be positive");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be positive");
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.episodes_per_epoch
    }

    pub fn warmup_steps(&self) -> usize {
        self.warmup_epochs * self.episodes_per_epoch
    }
}

/// Linear warm-up from `lr_min` to `lr_max`, then cosine annealing back to
/// `lr_min` at `total_steps`.
pub fn lr_schedule(step: usize, total_steps: usize, cfg: &TrainConfig) -> Result<f64> {
    if step > total_steps {
        return Err(Error::Config(format!("schedule step {step} beyond total {total_steps}")));
    }
    let warmup = cfg.warmup_steps().min(total_steps);
    let (lo, hi) = (cfg.lr_min, cfg.lr_max);
    if step < warmup {
        let t = step as f64 / warmup as f64;
        return Ok(lo * (1.0 - t) + hi * t);
    }
    let span = total_steps - warmup;
    let progress = if span == 0 {
        1.0
    } else {
        (step - warmup) as f64 / span as f64
    };
    // weights instead of lo + (hi - lo) * w so both endpoints come out exact
    let w = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    Ok(hi * w + lo * (1.0 - w))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
    pub lr: f64,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_acc,lr\n");
    for r in history {
        writeln!(out, "{},{},{},{}", r.epoch, r.train_loss, r.val_acc, r.lr).expect("string write");
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
    /// Accuracy of the initial checkpoint on the validation episodes.
    pub init_val_acc: f64,
    /// Epoch of the returned weights; 0 when no epoch beat the initial ones.
    pub best_epoch: usize,
}

/// Mean readout accuracy over `episodes`, evaluated in parallel and summed
/// in episode order.
pub fn mean_readout_accuracy(backbone: &Backbone, episodes: &[Episode], tau: f64) -> Result<f64> {
    let accs = episodes
        .par_iter()
        .map(|ep| readout_accuracy(backbone, ep, tau))
        .collect::<Result<Vec<f64>>>()?;
    Ok(accs.iter().sum::<f64>() / accs.len() as f64)
}

pub fn validation_episodes(ds: &Dataset, sampler: &SamplerConfig, count: usize, seed: u64) -> Result<Vec<Episode>> {
    (0..count as u64)
        .map(|i| Ok(sample_episode(ds, sampler, &mut episode_rng(seed ^ VALIDATION_SEED_SALT, i))?))
        .collect()
}

/// Episodic training with Adam under [`lr_schedule`]. Keeps the weights with
/// the best accuracy on a fixed set of validation episodes and stops after
/// `patience` epochs without improvement.
pub fn meta_train(
    init: &Checkpoint,
    train: &Dataset,
    val: &Dataset,
    sampler: &SamplerConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    sampler.check_feasible(train)?;
    sampler.check_feasible(val)?;
    let tau = cfg.temperature;
    if cfg.epochs == 0 {
        return Ok(TrainOutcome {
            checkpoint: init.clone(),
            history: Vec::new(),
            init_val_acc: f64::NAN,
            best_epoch: 0,
        });
    }

    let val_eps = validation_episodes(val, sampler, cfg.val_episodes, cfg.seed)?;
    let mut backbone = init.clone_for_task();
    let init_val_acc = mean_readout_accuracy(&backbone, &val_eps, tau)?;
    let mut best = (init_val_acc, 0usize, backbone.clone());
    let mut state = AdamState::new(backbone.params(), cfg.adam);
    let total = cfg.total_steps();
    let mut history = Vec::new();

    for epoch in 1..=cfg.epochs {
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for i in 0..cfg.episodes_per_epoch {
            let step = (epoch - 1) * cfg.episodes_per_epoch + i;
            lr = lr_schedule(step, total, cfg)?;
            let ep = sample_episode(train, sampler, &mut episode_rng(cfg.seed, step as u64))?;
            let mut tape = Tape::new();
            let params = backbone.register(&mut tape, true);
            let loss = episode_loss(&mut tape, &backbone, &params, &ep, tau)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    step,
                    context: format!("meta-training epoch {epoch}, lr {lr}"),
                });
            }
            loss_sum += value;
            tape.backward(loss)?;
            let grads: Vec<Tensor> = params.iter().map(|&p| tape.grad_or_zeros(p)).collect();
            adam_step(backbone.params_mut(), &grads, &mut state, lr)?;
        }
        let val_acc = mean_readout_accuracy(&backbone, &val_eps, tau)?;
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / cfg.episodes_per_epoch as f64,
            val_acc,
            lr,
        });
        if val_acc > best.0 {
            best = (val_acc, epoch, backbone.clone());
        } else if epoch - best.1 >= cfg.patience {
            break;
        }
    }

    let (_, best_epoch, weights) = best;
    let checkpoint = if best_epoch == 0 {
        init.clone()
    } else {
        Checkpoint::new(weights, Stage::Metatrained, init.config_digest.clone())
    };
    Ok(TrainOutcome {
        checkpoint,
        history,
        init_val_acc,
        best_epoch,
    })
}
