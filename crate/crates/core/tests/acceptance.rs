//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero if any failed.

use std::io::Write;
use std::time::Instant;

use pmf_core::backbone::{Backbone, BackboneSpec, Checkpoint};
use pmf_core::dataio::{apply_domain_shift, generate_synthetic, DomainShift, Splits, SyntheticSpec};
use pmf_core::episodes::{episode_rng, sample_episode, validate_episode, Count, SamplerConfig};
use pmf_core::evalharness::{confidence_interval, evaluate, EvalMode, EvalSettings, Report};
use pmf_core::finetune::{finetune_task, select_learning_rate, task_rng, FineTunePolicy};
use pmf_core::pretrain::{pretrain, AugmentPolicy, PretrainConfig};
use pmf_core::protonet::{
    classify, compute_prototypes, cosine_logits, episode_loss_grad_check, lr_schedule, meta_train, readout, Prototypes,
    TrainConfig,
};
use pmf_core::tensor::{verification_suite, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut checks = verification_suite(100, 2024).unwrap();
    checks.push(episode_loss_grad_check(100, 2024).unwrap());
    let secs = start.elapsed().as_secs_f64();
    let worst = checks.iter().max_by(|a, b| a.max_error.total_cmp(&b.max_error)).unwrap();
    outcome(
        worst.max_error <= 1e-4 && secs < 30.0,
        format!(
            "{} ops + episode_loss x 100 inputs: worst {:.2e} ({}) <= 1e-4; {secs:.1}s < 30s",
            checks.len() - 1,
            worst.max_error,
            worst.name
        ),
    )
}

fn brute_force_nearest(query: &[f64], protos: &Tensor) -> usize {
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    };
    let mut best = 0;
    let mut best_cos = f64::NEG_INFINITY;
    for k in 0..protos.shape()[0] {
        let c = cos(query, protos.row(k));
        if c > best_cos {
            best_cos = c;
            best = k;
        }
    }
    best
}

fn classifier_contract() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst_sum, mut argmax_bad, mut scale_bad, mut shift_bad) = (0.0f64, 0, 0, 0);
    for _ in 0..1000 {
        let (q, k, m) = (rng.random_range(1..=12), rng.random_range(2..=10), rng.random_range(2..=16));
        let tau = rng.random_range(0.5..20.0);
        let query = gaussian(q, m, &mut rng);
        let protos = Prototypes {
            matrix: gaussian(k, m, &mut rng),
        };
        let logits = cosine_logits(&query, &protos, tau).unwrap();
        let c = classify(&logits);
        for row in c.probabilities.data().chunks(k) {
            worst_sum = worst_sum.max((row.iter().sum::<f64>() - 1.0).abs());
        }
        for i in 0..q {
            if c.predictions[i] != brute_force_nearest(query.row(i), &protos.matrix) {
                argmax_bad += 1;
            }
        }
        let s = rng.random_range(1e-3..1e3);
        let scaled = |t: &Tensor| Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * s).collect()).unwrap();
        let scaled_logits = cosine_logits(&scaled(&query), &Prototypes { matrix: scaled(&protos.matrix) }, tau).unwrap();
        if classify(&scaled_logits).predictions != c.predictions {
            scale_bad += 1;
        }
        let shift = rng.random_range(-50.0..50.0);
        let shifted = Tensor::new(logits.shape().to_vec(), logits.data().iter().map(|v| v + shift).collect()).unwrap();
        if classify(&shifted).predictions != c.predictions {
            shift_bad += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst_sum <= 1e-9 && argmax_bad == 0 && scale_bad == 0 && shift_bad == 0 && secs < 10.0,
        format!(
            "1000 instances: max |row sum - 1| {worst_sum:.1e} <= 1e-9; argmax mismatches {argmax_bad}; \
             scaling changes {scale_bad}; logit-shift changes {shift_bad}; {secs:.2}s < 10s"
        ),
    )
}

fn prototype_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let (k, m) = (rng.random_range(1..=8), rng.random_range(1..=12));
        let n = k + rng.random_range(0..20);
        let mut labels: Vec<usize> = (0..k).chain((k..n).map(|_| rng.random_range(0..k))).collect();
        for i in (1..labels.len()).rev() {
            labels.swap(i, rng.random_range(0..=i));
        }
        let emb = gaussian(n, m, &mut rng);
        let got = compute_prototypes(&emb, &labels).unwrap();
        for class in 0..k {
            let mut sum = vec![0.0; m];
            let mut count = 0usize;
            for (i, &l) in labels.iter().enumerate() {
                if l == class {
                    for j in 0..m {
                        sum[j] += emb.row(i)[j];
                    }
                    count += 1;
                }
            }
            for j in 0..m {
                worst = worst.max((got.matrix.row(class)[j] - sum[j] / count as f64).abs());
            }
        }
    }
    outcome(worst <= 1e-12, format!("1000 instances: max deviation {worst:.1e} <= 1e-12"))
}

fn sampler_contract() -> Outcome {
    let splits = generate_synthetic(&SyntheticSpec {
        name: "sampler".into(),
        feature_dim: 4,
        num_classes: 100,
        items_per_class: 25,
        class_sep: 8.0,
        noise_sigma: 1.0,
        seed: 3,
    })
    .unwrap();
    let cfg = SamplerConfig {
        way: Count::Range([3, 10]),
        shot: Count::Range([1, 5]),
        queries_per_class: 5,
        seed: 17,
    };
    let n = 10_000;
    let stream = |seed: u64| -> Vec<_> {
        (0..n)
            .map(|i| sample_episode(&splits.train, &SamplerConfig { seed, ..cfg.clone() }, &mut episode_rng(seed, i)).unwrap())
            .collect()
    };
    let episodes = stream(cfg.seed);
    let violations: usize = episodes.iter().map(|e| validate_episode(e).err().map_or(0, |v| v.len())).sum();
    let mut counts = [0usize; 8];
    episodes.iter().for_each(|e| counts[e.way - 3] += 1);
    let p = 1.0 / 8.0;
    let (mu, sigma) = (n as f64 * p, (n as f64 * p * (1.0 - p)).sqrt());
    let worst_z = counts.iter().map(|&c| (c as f64 - mu).abs() / sigma).fold(0.0, f64::max);
    let identical = stream(cfg.seed) == episodes;
    outcome(
        violations == 0 && worst_z <= 5.0 && identical,
        format!(
            "10000 episodes: {violations} violations; way counts {counts:?}, worst |z| {worst_z:.2} <= 5; \
             same seed reproduces stream: {identical}"
        ),
    )
}

/// The efficacy data: well separated Gaussian classes (class_sep/noise = 8)
/// behind a fixed per-coordinate rescaling, so the raw coordinates are a poor
/// metric for cosine readout while the Bayes classifier is unaffected.
fn efficacy_splits() -> Splits {
    let raw = generate_synthetic(&SyntheticSpec {
        name: "synthetic".into(),
        feature_dim: 32,
        num_classes: 400,
        items_per_class: 30,
        class_sep: 8.0,
        noise_sigma: 1.0,
        seed: 1,
    })
    .unwrap();
    raw.map(|ds| apply_domain_shift(ds, &DomainShift::SigmaRescale { factor: 300.0, seed: 7 }))
        .unwrap()
}

struct Pipeline {
    splits: Splits,
    sampler: SamplerConfig,
    random: Checkpoint,
    trained: Checkpoint,
    seconds: f64,
}

fn run_pipeline() -> Pipeline {
    let start = Instant::now();
    let splits = efficacy_splits();
    let sampler = SamplerConfig::fixed(5, 5, 15, 0);
    let random = Checkpoint::random(BackboneSpec::mlp(32, vec![64, 64], 32, 0)).unwrap();
    let pre = pretrain(
        &random,
        &splits.train.unlabeled(),
        &PretrainConfig {
            steps: 1000,
            ..PretrainConfig::default()
        },
        &AugmentPolicy::default(),
    )
    .unwrap();
    let train = TrainConfig {
        epochs: 40,
        episodes_per_epoch: 1000,
        lr_min: 1e-5,
        lr_max: 2e-3,
        warmup_epochs: 1,
        temperature: 10.0,
        val_episodes: 100,
        patience: 40,
        ..TrainConfig::default()
    };
    let trained = meta_train(&pre.checkpoint, &splits.train, &splits.val, &sampler, &train).unwrap().checkpoint;
    Pipeline {
        splits,
        sampler,
        random,
        trained,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn pipeline_efficacy(p: &Pipeline) -> Outcome {
    let start = Instant::now();
    let settings = EvalSettings {
        episodes: 600,
        workers: 1,
        temperature: 10.0,
    };
    let eval = |ckpt: &Checkpoint| evaluate(ckpt, &p.splits.test, &p.sampler, EvalMode::Readout, None, &settings).unwrap();
    let (pm, random) = (eval(&p.trained), eval(&p.random));
    let gap = pm.mean_accuracy - random.mean_accuracy;
    let secs = p.seconds + start.elapsed().as_secs_f64();
    outcome(
        pm.mean_accuracy >= 0.95 && gap >= 0.30 && secs < 600.0,
        format!(
            "5w5s x 600 test episodes: P->M {:.4} >= 0.95; random init {:.4}; gap {gap:.4} >= 0.30; {secs:.0}s < 600s",
            pm.mean_accuracy, random.mean_accuracy
        ),
    )
}

fn finetune_direction(p: &Pipeline) -> Outcome {
    let start = Instant::now();
    let policy = FineTunePolicy {
        temperature: 10.0,
        ..FineTunePolicy::default()
    };
    let settings = EvalSettings {
        episodes: 100,
        workers: 1,
        temperature: 10.0,
    };
    let shifted = p
        .splits
        .map(|ds| apply_domain_shift(ds, &DomainShift::FeaturePermutation { seed: 11 }))
        .unwrap();
    let gain = |splits: &Splits| -> (f64, f64, f64) {
        let search = select_learning_rate(&p.trained, &splits.val, &p.sampler, &policy).unwrap();
        let base = evaluate(&p.trained, &splits.test, &p.sampler, EvalMode::Readout, None, &settings).unwrap();
        let tuned = evaluate(
            &p.trained,
            &splits.test,
            &p.sampler,
            EvalMode::FinetuneSearched { lr: search.chosen_lr },
            Some(&policy),
            &settings,
        )
        .unwrap();
        let diff = tuned.accuracies.iter().zip(&base.accuracies).map(|(a, b)| a - b).sum::<f64>() / 100.0;
        (search.chosen_lr, base.mean_accuracy, diff)
    };
    let (lr_out, base_out, diff_out) = gain(&shifted);
    let (lr_in, base_in, diff_in) = gain(&p.splits);
    let secs = start.elapsed().as_secs_f64();
    outcome(
        diff_out >= 0.05 && diff_in >= -0.01 && secs < 900.0,
        format!(
            "permuted domain: readout {base_out:.4}, searched lr {lr_out}, gain {diff_out:+.4} >= 0.05; \
             unshifted: readout {base_in:.4}, searched lr {lr_in}, gain {diff_in:+.4} >= -0.01; {secs:.0}s < 900s"
        ),
    )
}

fn small_splits(seed: u64) -> Splits {
    generate_synthetic(&SyntheticSpec {
        name: "small".into(),
        feature_dim: 16,
        num_classes: 50,
        items_per_class: 25,
        class_sep: 4.0,
        noise_sigma: 1.0,
        seed,
    })
    .unwrap()
}

fn zero_lr_identity() -> Outcome {
    let splits = small_splits(5);
    let ckpt = Checkpoint::random(BackboneSpec::mlp(16, vec![32], 8, 3)).unwrap();
    let sampler = SamplerConfig::fixed(5, 5, 10, 4);
    let policy = FineTunePolicy::default();
    let no_steps = FineTunePolicy { steps: 0, ..policy.clone() };
    let mut mismatches = 0;
    for i in 0..100 {
        let ep = sample_episode(&splits.test, &sampler, &mut episode_rng(sampler.seed, i)).unwrap();
        let logits = readout(ckpt.backbone(), &ep, policy.temperature).unwrap();
        let expected = classify(&logits).predictions;
        let zero_lr = finetune_task(&ckpt, &ep, 0.0, &policy, &mut task_rng(&policy, i)).unwrap();
        let zero_steps = finetune_task(&ckpt, &ep, 0.01, &no_steps, &mut task_rng(&no_steps, i)).unwrap();
        for r in [&zero_lr, &zero_steps] {
            if r.predictions != expected || !r.logits.bitwise_eq(&logits) {
                mismatches += 1;
            }
        }
    }
    outcome(
        mismatches == 0,
        format!("100 episodes, lr=0 (50 steps) and steps=0: {mismatches} runs differ from readout bitwise"),
    )
}

fn schedule_endpoints() -> Outcome {
    let cfg = TrainConfig::default();
    let total = cfg.total_steps();
    let first = lr_schedule(0, total, &cfg).unwrap();
    let peak = lr_schedule(cfg.warmup_steps(), total, &cfg).unwrap();
    let last = lr_schedule(total, total, &cfg).unwrap();
    outcome(
        first == 1e-6 && peak == 5e-5 && (last - 1e-6).abs() <= 1e-12,
        format!("step 0 -> {first:e} (exact 1e-6); warmup end -> {peak:e} (exact 5e-5); final -> {last:e} (1e-6 within 1e-12)"),
    )
}

fn small_pipeline_reports(workers: usize) -> (Report, Report, Checkpoint, Splits) {
    let splits = small_splits(8);
    let sampler = SamplerConfig::fixed(5, 2, 8, 21);
    let init = Checkpoint::random(BackboneSpec::mlp(16, vec![24], 8, 6)).unwrap();
    let pre = pretrain(
        &init,
        &splits.train.unlabeled(),
        &PretrainConfig {
            steps: 40,
            batch_size: 16,
            seed: 2,
            ..PretrainConfig::default()
        },
        &AugmentPolicy::default(),
    )
    .unwrap();
    let train = TrainConfig {
        epochs: 3,
        episodes_per_epoch: 30,
        warmup_epochs: 1,
        lr_max: 1e-3,
        temperature: 10.0,
        val_episodes: 20,
        seed: 4,
        ..TrainConfig::default()
    };
    let ckpt = meta_train(&pre.checkpoint, &splits.train, &splits.val, &sampler, &train).unwrap().checkpoint;
    let settings = EvalSettings {
        episodes: 40,
        workers,
        temperature: 10.0,
    };
    let policy = FineTunePolicy {
        steps: 10,
        seed: 9,
        ..FineTunePolicy::default()
    };
    let readout = evaluate(&ckpt, &splits.test, &sampler, EvalMode::Readout, None, &settings).unwrap();
    let tuned = evaluate(&ckpt, &splits.test, &sampler, EvalMode::Finetune { lr: 0.01 }, Some(&policy), &settings).unwrap();
    (readout, tuned, ckpt, splits)
}

fn determinism() -> Outcome {
    let (r1, f1, ckpt, splits) = small_pipeline_reports(1);
    let (r2, f2, _, _) = small_pipeline_reports(1);
    let replay = r1.to_json() == r2.to_json() && f1.to_json() == f2.to_json();
    let (r8, f8, _, _) = small_pipeline_reports(8);
    let parallel = r1.to_json() == r8.to_json() && f1.to_json() == f8.to_json();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.pmfc");
    ckpt.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let items = splits.test.gather(&(0..splits.test.len()).collect::<Vec<_>>());
    let round_trip = ckpt.backbone().embed(&items).unwrap().bitwise_eq(&loaded.backbone().embed(&items).unwrap())
        && Backbone::from_params(loaded.spec().clone(), loaded.backbone().params().to_vec()).is_ok();
    outcome(
        replay && parallel && round_trip,
        format!(
            "replayed pipeline reports identical: {replay}; workers=8 equals sequential: {parallel}; \
             checkpoint round-trip embeds {} items bitwise: {round_trip}",
            splits.test.len()
        ),
    )
}

fn ci_formula() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst = 0.0f64;
    for t in 0..1000 {
        let e = rng.random_range(2..=700);
        let values: Vec<f64> = if t % 2 == 0 {
            (0..e).map(|_| rng.random_range(0..=75) as f64 / 75.0).collect()
        } else {
            (0..e).map(|_| rng.random::<f64>()).collect()
        };
        let mean = values.iter().sum::<f64>() / e as f64;
        let s = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (e - 1) as f64).sqrt();
        let half = 1.96 * s / (e as f64).sqrt();
        let (m, h) = confidence_interval(&values).unwrap();
        worst = worst.max((m - mean).abs()).max((h - half).abs());
    }
    let alternating: Vec<f64> = (0..600).map(|i| (i % 2) as f64).collect();
    let (m, h) = confidence_interval(&alternating).unwrap();
    let closed = 1.96 * (150.0f64 / 599.0).sqrt() / 600f64.sqrt();
    let alt_ok = m == 0.5 && (h - closed).abs() <= 1e-12 && (h - 0.04004).abs() < 5e-6;
    outcome(
        worst <= 1e-12 && alt_ok,
        format!("1000 vectors: max deviation {worst:.1e} <= 1e-12; alternating 0/1 at E=600 -> mean {m}, half-width {h:.5}"),
    )
}

fn main() {
    let mut out = std::io::stdout().lock();
    let mut failed = 0;
    let mut report = |n: usize, name: &str, o: Outcome| {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        failed += usize::from(!o.pass);
        writeln!(out, "[{tag}] criterion {n:>2} {name}: {}", o.detail).unwrap();
        out.flush().unwrap();
    };
    report(1, "gradient correctness", gradient_correctness());
    report(2, "classifier contract", classifier_contract());
    report(3, "prototype oracle", prototype_oracle());
    report(4, "sampler contract", sampler_contract());
    let pipeline = run_pipeline();
    report(5, "pipeline efficacy", pipeline_efficacy(&pipeline));
    report(6, "fine-tuning direction", finetune_direction(&pipeline));
    report(7, "zero-lr identity", zero_lr_identity());
    report(8, "schedule endpoints", schedule_endpoints());
    report(9, "determinism and isolation", determinism());
    report(10, "confidence interval", ci_formula());
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
