//! Meta-test fine-tuning of a private backbone copy on the support set of
//! one task, and domain-wise selection of its learning rate.
//!
//! Each step augments the support set into a pseudo-query, classifies it
//! against prototypes recomputed from the unaugmented support with the
//! current weights, and takes an Adam step on every parameter. The final
//! query logits use prototypes from the adapted weights.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, Checkpoint};
use crate::dataio::{feature_std, Dataset};
use crate::episodes::{episode_rng, sample_episode, Episode, SamplerConfig};
use crate::pretrain::{augment_batch, AugmentPolicy};
use crate::protonet::{accuracy, classify, cosine_logits_on_tape, prototypes_on_tape, readout};
use crate::tensor::{adam_step, AdamConfig, AdamState, Tape, Tensor};
use crate::{Error, Result};

const TASK_SEED_SALT: u64 = 0x4654_5f54_4153_4b53;
const SEARCH_SEED_SALT: u64 = 0x4c52_5f53_4541_5243;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FineTunePolicy {
    pub lr_grid: Vec<f64>,
    pub steps: usize,
    pub augment: AugmentPolicy,
    pub val_tasks: usize,
    pub temperature: f64,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for FineTunePolicy {
    fn default() -> Self {
        Self {
            lr_grid: vec![0.01, 0.001, 0.0001, 0.0],
            steps: 50,
            augment: AugmentPolicy::default(),
            val_tasks: 5,
            temperature: 1.0,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

impl FineTunePolicy {
    pub fn validate(&self) -> Result<()> {
        if self.lr_grid.is_empty() || !self.lr_grid.contains(&0.0) {
            return Err(Error::Config("finetune: lr_grid must be non-empty and contain 0".into()));
        }
        if let Some(lr) = self.lr_grid.iter().find(|lr| !(**lr >= 0.0 && lr.is_finite())) {
            return Err(Error::Config(format!("finetune: learning rate {lr} in lr_grid is not >= 0")));
        }
        if self.val_tasks == 0 {
            return Err(Error::Config("finetune: val_tasks must be positive".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config("finetune: temperature must be positive".into()));
        }
        self.augment.validate()
    }
}

/// Random stream of the fine-tuning run for task `index`.
pub fn task_rng(policy: &FineTunePolicy, index: u64) -> ChaCha8Rng {
    episode_rng(policy.seed ^ TASK_SEED_SALT, index)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FineTuneResult {
    pub logits: Tensor,
    pub predictions: Vec<usize>,
    /// Pseudo-query loss before each step.
    pub losses: Vec<f64>,
}

impl FineTuneResult {
    pub fn accuracy(&self, episode: &Episode) -> f64 {
        accuracy(&self.predictions, &episode.query_labels)
    }
}

/// The adaptation loop alone; returns the adapted copy and the loss trace.
pub(crate) fn adapt<R: Rng>(
    ckpt: &Checkpoint,
    episode: &Episode,
    lr: f64,
    policy: &FineTunePolicy,
    rng: &mut R,
) -> Result<(Backbone, Vec<f64>)> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::Config(format!("finetune: learning rate {lr} must be >= 0")));
    }
    let mut backbone = ckpt.clone_for_task();
    let item_len = episode.support.numel() / episode.support_len().max(1);
    let std = feature_std(episode.support.data().chunks(item_len), item_len);
    let labels = &episode.support_labels;
    let mut state = AdamState::new(backbone.params(), policy.adam);
    let mut losses = Vec::with_capacity(policy.steps);
    for step in 0..policy.steps {
        let pseudo = augment_batch(&episode.support, &policy.augment, &std, rng);
        let mut tape = Tape::new();
        let params = backbone.register(&mut tape, true);
        let sx = tape.constant(episode.support.clone());
        let support = backbone.forward(&mut tape, &params, sx)?;
        let protos = prototypes_on_tape(&mut tape, support, labels)?;
        let zx = tape.constant(pseudo);
        let z = backbone.forward(&mut tape, &params, zx)?;
        let logits = cosine_logits_on_tape(&mut tape, z, protos, policy.temperature)?;
        let loss = tape.softmax_cross_entropy(logits, labels)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                step,
                context: format!("fine-tuning at lr {lr}"),
            });
        }
        losses.push(value);
        tape.backward(loss)?;
        let grads: Vec<Tensor> = params.iter().map(|&p| tape.grad_or_zeros(p)).collect();
        adam_step(backbone.params_mut(), &grads, &mut state, lr)?;
    }
    Ok((backbone, losses))
}

/// Fine-tunes a fresh copy of `ckpt` on the support set of `episode` and
/// classifies its query set. The copy is dropped on return.
pub fn finetune_task<R: Rng>(
    ckpt: &Checkpoint,
    episode: &Episode,
    lr: f64,
    policy: &FineTunePolicy,
    rng: &mut R,
) -> Result<FineTuneResult> {
    let (backbone, losses) = adapt(ckpt, episode, lr, policy, rng)?;
    let logits = readout(&backbone, episode, policy.temperature)?;
    let predictions = classify(&logits).predictions;
    Ok(FineTuneResult {
        logits,
        predictions,
        losses,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrScore {
    pub lr: f64,
    pub mean_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSearch {
    pub chosen_lr: f64,
    pub per_lr: Vec<LrScore>,
}

/// Highest mean accuracy; among equals, the smallest learning rate.
pub fn pick_learning_rate(scores: &[LrScore]) -> Option<f64> {
    scores
        .iter()
        .fold(None::<&LrScore>, |best, s| match best {
            Some(b) if b.mean_accuracy > s.mean_accuracy => Some(b),
            Some(b) if b.mean_accuracy == s.mean_accuracy && b.lr <= s.lr => Some(b),
            _ => Some(s),
        })
        .map(|s| s.lr)
}

/// Scores every grid learning rate on the same `val_tasks` episodes of
/// `domain_val` (same fine-tuning streams too) and picks the best.
pub fn select_learning_rate(
    ckpt: &Checkpoint,
    domain_val: &Dataset,
    sampler: &SamplerConfig,
    policy: &FineTunePolicy,
) -> Result<LrSearch> {
    policy.validate()?;
    let episodes: Vec<Episode> = (0..policy.val_tasks as u64)
        .map(|i| Ok(sample_episode(domain_val, sampler, &mut episode_rng(policy.seed ^ SEARCH_SEED_SALT, i))?))
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, usize)> = (0..policy.lr_grid.len())
        .flat_map(|g| (0..episodes.len()).map(move |e| (g, e)))
        .collect();
    let accs = jobs
        .par_iter()
        .map(|&(g, e)| {
            let lr = policy.lr_grid[g];
            let mut rng = episode_rng(policy.seed ^ SEARCH_SEED_SALT ^ TASK_SEED_SALT, e as u64);
            finetune_task(ckpt, &episodes[e], lr, policy, &mut rng).map(|r| r.accuracy(&episodes[e]))
        })
        .collect::<Result<Vec<f64>>>()?;
    let per_lr: Vec<LrScore> = policy
        .lr_grid
        .iter()
        .enumerate()
        .map(|(g, &lr)| {
            let row = &accs[g * episodes.len()..(g + 1) * episodes.len()];
            LrScore {
                lr,
                mean_accuracy: row.iter().sum::<f64>() / row.len() as f64,
            }
        })
        .collect();
    let chosen_lr = pick_learning_rate(&per_lr).expect("grid is non-empty");
    Ok(LrSearch { chosen_lr, per_lr })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneSpec;
    use crate::dataio::{apply_domain_shift, generate_synthetic, DomainShift, Splits, SyntheticSpec};
    use crate::protonet::{compute_prototypes, cosine_logits};

    fn splits() -> Splits {
        generate_synthetic(&SyntheticSpec {
            name: "ft".into(),
            feature_dim: 12,
            num_classes: 30,
            items_per_class: 25,
            class_sep: 3.0,
            noise_sigma: 1.0,
            seed: 31,
        })
        .unwrap()
    }

    fn ckpt() -> Checkpoint {
        Checkpoint::random(BackboneSpec::mlp(12, vec![24], 12, 4)).unwrap()
    }

    fn episode(ds: &Dataset, i: u64) -> Episode {
        sample_episode(ds, &SamplerConfig::fixed(5, 5, 15, 0), &mut episode_rng(6, i)).unwrap()
    }

    fn policy(steps: usize) -> FineTunePolicy {
        FineTunePolicy {
            steps,
            temperature: 10.0,
            ..FineTunePolicy::default()
        }
    }

    #[test]
    fn zero_lr_and_zero_steps_match_readout_bitwise() {
        let s = splits();
        let ck = ckpt();
        for i in 0..10 {
            let ep = episode(&s.test, i);
            let plain = readout(ck.backbone(), &ep, 10.0).unwrap();
            let a = finetune_task(&ck, &ep, 0.0, &policy(5), &mut task_rng(&policy(5), i)).unwrap();
            let b = finetune_task(&ck, &ep, 0.01, &policy(0), &mut task_rng(&policy(0), i)).unwrap();
            assert!(a.logits.bitwise_eq(&plain));
            assert!(b.logits.bitwise_eq(&plain));
            assert_eq!(a.predictions, classify(&plain).predictions);
            assert_eq!(a.losses.len(), 5);
            assert!(b.losses.is_empty());
        }
    }

    #[test]
    fn final_prototypes_come_from_the_adapted_backbone() {
        let s = splits();
        let ck = ckpt();
        let ep = episode(&s.test, 0);
        let p = policy(10);
        let result = finetune_task(&ck, &ep, 0.05, &p, &mut task_rng(&p, 0)).unwrap();
        let (adapted, _) = adapt(&ck, &ep, 0.05, &p, &mut task_rng(&p, 0)).unwrap();
        let query = adapted.embed(&ep.query).unwrap();
        let fresh = compute_prototypes(&adapted.embed(&ep.support).unwrap(), &ep.support_labels).unwrap();
        let stale = compute_prototypes(&ck.backbone().embed(&ep.support).unwrap(), &ep.support_labels).unwrap();
        let with_fresh = cosine_logits(&query, &fresh, 10.0).unwrap();
        let with_stale = cosine_logits(&query, &stale, 10.0).unwrap();
        assert!(result.logits.bitwise_eq(&with_fresh));
        let gap = with_fresh
            .data()
            .iter()
            .zip(with_stale.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(gap > 1e-3, "{gap}");
        // the source checkpoint is untouched
        assert_eq!(ck, ckpt());
    }

    #[test]
    fn task_order_does_not_matter() {
        let s = splits();
        let ck = ckpt();
        let p = policy(3);
        let eps: Vec<Episode> = (0..4).map(|i| episode(&s.test, i)).collect();
        let forward: Vec<_> = (0..4)
            .map(|i| finetune_task(&ck, &eps[i], 0.01, &p, &mut task_rng(&p, i as u64)).unwrap())
            .collect();
        for i in (0..4).rev() {
            let again = finetune_task(&ck, &eps[i], 0.01, &p, &mut task_rng(&p, i as u64)).unwrap();
            assert_eq!(again, forward[i]);
            assert!(again.losses.iter().all(|l| l.is_finite()));
        }
    }

    #[test]
    fn diverging_step_is_reported() {
        let s = splits();
        let ck = ckpt();
        let ep = episode(&s.test, 0);
        let p = policy(200);
        let err = finetune_task(&ck, &ep, 1e300, &p, &mut task_rng(&p, 0)).unwrap_err();
        match err {
            Error::NonFinite { step, context } => {
                assert!(step > 0 && step < 200);
                assert!(context.contains(&1e300f64.to_string()));
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn argmax_and_tie_break() {
        let table = |v: [f64; 4]| -> Vec<LrScore> {
            [0.01, 0.001, 0.0001, 0.0]
                .iter()
                .zip(v)
                .map(|(&lr, mean_accuracy)| LrScore { lr, mean_accuracy })
                .collect()
        };
        assert_eq!(pick_learning_rate(&table([0.8, 0.7, 0.6, 0.5])), Some(0.01));
        assert_eq!(pick_learning_rate(&table([0.5; 4])), Some(0.0));
        assert_eq!(pick_learning_rate(&table([0.6, 0.7, 0.7, 0.5])), Some(0.0001));
        assert_eq!(pick_learning_rate(&[]), None);
    }

    #[test]
    fn policy_validation() {
        assert!(FineTunePolicy::default().validate().is_ok());
        let no_zero = FineTunePolicy {
            lr_grid: vec![0.1, 0.01],
            ..FineTunePolicy::default()
        };
        assert!(matches!(no_zero.validate(), Err(Error::Config(_))));
        let p: FineTunePolicy = serde_json::from_str(r#"{"steps": 10}"#).unwrap();
        assert_eq!(p.lr_grid, vec![0.01, 0.001, 0.0001, 0.0]);
        assert_eq!(p.augment.apply_probability, 0.9);
        assert!(serde_json::from_str::<FineTunePolicy>(r#"{"step": 10}"#).is_err());
    }

    #[test]
    fn search_never_picks_below_zero_lr() {
        let s = splits();
        let ck = ckpt();
        let p = FineTunePolicy {
            steps: 10,
            ..policy(10)
        };
        let shifted = apply_domain_shift(&s.val, &DomainShift::FeaturePermutation { seed: 2 }).unwrap();
        let search = select_learning_rate(&ck, &shifted, &SamplerConfig::fixed(5, 5, 15, 0), &p).unwrap();
        assert_eq!(search.per_lr.len(), 4);
        let zero = search.per_lr.iter().find(|s| s.lr == 0.0).unwrap().mean_accuracy;
        let chosen = search.per_lr.iter().find(|s| s.lr == search.chosen_lr).unwrap().mean_accuracy;
        assert!(chosen >= zero);
        // deterministic
        let again = select_learning_rate(&ck, &shifted, &SamplerConfig::fixed(5, 5, 15, 0), &p).unwrap();
        assert_eq!(again, search);
        let json = serde_json::to_value(&search).unwrap();
        assert!(json["per_lr"][0]["mean_accuracy"].is_number());
    }

    #[test]
    fn infeasible_search_is_an_error() {
        let s = splits();
        let sampler = SamplerConfig::fixed(5, 5, 40, 0);
        assert!(select_learning_rate(&ckpt(), &s.val, &sampler, &policy(1)).is_err());
    }
}
