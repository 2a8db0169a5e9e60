//! Episode-level benchmark runs, confidence intervals, and exports.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::Checkpoint;
use crate::dataio::Dataset;
use crate::episodes::{episode_rng, sample_episode, SamplerConfig};
use crate::finetune::{finetune_task, select_learning_rate, task_rng, FineTunePolicy, LrSearch};
use crate::protonet::readout_accuracy;
use crate::{Error, Result};

/// Two-sided 95% normal quantile.
pub const Z_95: f64 = 1.96;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EvalMode {
    Readout,
    Finetune { lr: f64 },
    /// Fine-tuning at a learning rate chosen on the domain's validation tasks.
    FinetuneSearched { lr: f64 },
}

impl EvalMode {
    pub fn label(&self) -> String {
        match self {
            EvalMode::Readout => "readout".into(),
            EvalMode::Finetune { lr } => format!("finetune(lr={lr})"),
            EvalMode::FinetuneSearched { lr } => format!("finetune(searched lr={lr})"),
        }
    }

    fn lr(&self) -> Option<f64> {
        match *self {
            EvalMode::Readout => None,
            EvalMode::Finetune { lr } | EvalMode::FinetuneSearched { lr } => Some(lr),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub domain_name: String,
    pub mode: EvalMode,
    pub episodes: usize,
    pub accuracies: Vec<f64>,
    pub mean_accuracy: f64,
    pub ci95: f64,
    /// Kept out of the JSON so that reruns serialise identically.
    #[serde(skip)]
    pub wall_clock_seconds: f64,
    pub config_digest: String,
    pub seed: u64,
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serialises")
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }
}

/// Mean and `Z_95 * s / sqrt(E)` with `s` the sample standard deviation.
pub fn confidence_interval(accuracies: &[f64]) -> Result<(f64, f64)> {
    let e = accuracies.len();
    if e < 2 {
        return Err(Error::Config(format!("confidence interval needs at least 2 values, got {e}")));
    }
    let n = e as f64;
    let mean = accuracies.iter().sum::<f64>() / n;
    let ss: f64 = accuracies.iter().map(|a| (a - mean) * (a - mean)).sum();
    let s = (ss / (n - 1.0)).sqrt();
    Ok((mean, Z_95 * s / n.sqrt()))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalSettings {
    pub episodes: usize,
    /// Size of the worker pool; results do not depend on it.
    pub workers: usize,
    /// Cosine temperature for readout mode; fine-tuning uses the policy's.
    pub temperature: f64,
}

fn episode_accuracy(
    ckpt: &Checkpoint,
    ds: &Dataset,
    sampler: &SamplerConfig,
    mode: EvalMode,
    policy: Option<&FineTunePolicy>,
    temperature: f64,
    index: usize,
) -> Result<f64> {
    let ep = sample_episode(ds, sampler, &mut episode_rng(sampler.seed, index as u64))?;
    match (mode.lr(), policy) {
        (None, _) => readout_accuracy(ckpt.backbone(), &ep, temperature),
        (Some(lr), Some(p)) => Ok(finetune_task(ckpt, &ep, lr, p, &mut task_rng(p, index as u64))?.accuracy(&ep)),
        (Some(_), None) => Err(Error::Config("fine-tuning evaluation needs a policy".into())),
    }
}

/// Accuracy on `settings.episodes` episodes sampled from `sampler.seed`.
/// Episodes run on a pool of `settings.workers` threads and are merged in
/// index order, so the report does not depend on the pool size.
pub fn evaluate(
    ckpt: &Checkpoint,
    ds: &Dataset,
    sampler: &SamplerConfig,
    mode: EvalMode,
    policy: Option<&FineTunePolicy>,
    settings: &EvalSettings,
) -> Result<Report> {
    if settings.episodes == 0 {
        return Err(Error::Config("evaluation needs at least one episode".into()));
    }
    if mode.lr().is_some() {
        policy
            .ok_or_else(|| Error::Config("fine-tuning evaluation needs a policy".into()))?
            .validate()?;
    }
    sampler.check_feasible(ds)?;
    let start = std::time::Instant::now();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(settings.workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let results: Vec<Result<f64>> = pool.install(|| {
        (0..settings.episodes)
            .into_par_iter()
            .map(|i| episode_accuracy(ckpt, ds, sampler, mode, policy, settings.temperature, i))
            .collect()
    });
    let mut accuracies = Vec::with_capacity(results.len());
    for (index, r) in results.into_iter().enumerate() {
        accuracies.push(r.map_err(|e| Error::AtEpisode {
            index,
            source: Box::new(e),
        })?);
    }
    let (mean_accuracy, ci95) = if accuracies.len() == 1 {
        (accuracies[0], 0.0)
    } else {
        confidence_interval(&accuracies)?
    };
    Ok(Report {
        domain_name: ds.domain_name.clone(),
        mode,
        episodes: accuracies.len(),
        accuracies,
        mean_accuracy,
        ci95,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        config_digest: ckpt.config_digest.clone(),
        seed: sampler.seed,
    })
}

/// Picks the fine-tuning rate on `val_ds`, then evaluates `test_ds` with it.
pub fn evaluate_with_search(
    ckpt: &Checkpoint,
    test_ds: &Dataset,
    val_ds: &Dataset,
    sampler: &SamplerConfig,
    policy: &FineTunePolicy,
    settings: &EvalSettings,
) -> Result<(Report, LrSearch)> {
    let search = select_learning_rate(ckpt, val_ds, sampler, policy)?;
    let report = evaluate(
        ckpt,
        test_ds,
        sampler,
        EvalMode::FinetuneSearched { lr: search.chosen_lr },
        Some(policy),
        settings,
    )?;
    Ok((report, search))
}

/// One row per report: domain, mode, lr, episodes, mean accuracy, CI.
pub fn comparison_csv(reports: &[Report]) -> String {
    let mut out = String::from("domain,mode,lr,episodes,mean_accuracy,ci95\n");
    for r in reports {
        let kind = match r.mode {
            EvalMode::Readout => "readout",
            EvalMode::Finetune { .. } => "finetune",
            EvalMode::FinetuneSearched { .. } => "finetune_searched",
        };
        let lr = r.mode.lr().map_or(String::new(), |lr| lr.to_string());
        writeln!(out, "{},{kind},{lr},{},{},{}", r.domain_name, r.episodes, r.mean_accuracy, r.ci95).expect("string write");
    }
    out
}

/// Up to `max_items` items taken round-robin over classes (each class in a
/// seeded random order), as `label,e0,..,e{m-1}` CSV rows.
pub fn embeddings_csv(ckpt: &Checkpoint, ds: &Dataset, max_items: usize, seed: u64) -> Result<String> {
    let mut rng = episode_rng(seed, 0);
    let mut queues: Vec<Vec<usize>> = (0..ds.num_classes())
        .map(|k| {
            let mut items = ds.class_items(k).to_vec();
            items.shuffle(&mut rng);
            items.reverse();
            items
        })
        .collect();
    let mut picked = Vec::with_capacity(max_items.min(ds.len()));
    while picked.len() < max_items.min(ds.len()) {
        for q in queues.iter_mut() {
            if picked.len() == max_items {
                break;
            }
            if let Some(i) = q.pop() {
                picked.push(i);
            }
        }
    }
    let m = ckpt.backbone().embed_dim();
    let mut out = String::from("label");
    (0..m).for_each(|j| write!(out, ",e{j}").expect("string write"));
    out.push('\n');
    for chunk in picked.chunks(256) {
        let emb = ckpt.backbone().embed(&ds.gather(chunk))?;
        for (r, &i) in chunk.iter().enumerate() {
            write!(out, "{}", ds.label(i)).expect("string write");
            emb.row(r).iter().for_each(|v| write!(out, ",{v}").expect("string write"));
            out.push('\n');
        }
    }
    Ok(out)
}

/// Writes [`embeddings_csv`] to `out_path` and returns the number of rows.
pub fn dump_embeddings(ckpt: &Checkpoint, ds: &Dataset, max_items: usize, seed: u64, out_path: impl AsRef<Path>) -> Result<usize> {
    let csv = embeddings_csv(ckpt, ds, max_items, seed)?;
    std::fs::write(out_path, &csv)?;
    Ok(csv.lines().count() - 1)
}
