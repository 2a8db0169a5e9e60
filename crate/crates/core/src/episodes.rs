//! Episodic task sampling.
//!
//! Way and shot are drawn independently and uniformly from their configured
//! ranges, once per episode. A draw that the dataset cannot satisfy is
//! clamped: the way to the number of eligible classes, the shot of each
//! class to its size minus the query count. Items are never reused.

use std::collections::HashSet;
use std::fmt;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::Dataset;
use crate::tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum EpisodeError {
    #[error("invalid sampler config: {0}")]
    Config(String),
    #[error("only {eligible} classes have at least {needed} items; need {way_min} for an episode")]
    Infeasible {
        eligible: usize,
        needed: usize,
        way_min: usize,
    },
}

/// A fixed count or an inclusive `[min, max]` range sampled uniformly.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Count {
    Fixed(usize),
    Range([usize; 2]),
}

impl Count {
    pub fn min(self) -> usize {
        match self {
            Count::Fixed(n) => n,
            Count::Range([lo, _]) => lo,
        }
    }

    pub fn max(self) -> usize {
        match self {
            Count::Fixed(n) => n,
            Count::Range([_, hi]) => hi,
        }
    }

    pub fn draw<R: Rng>(self, rng: &mut R) -> usize {
        match self {
            Count::Fixed(n) => n,
            Count::Range([lo, hi]) => rng.random_range(lo..=hi),
        }
    }
}

fn default_queries() -> usize {
    15
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub way: Count,
    pub shot: Count,
    #[serde(default = "default_queries")]
    pub queries_per_class: usize,
    #[serde(default)]
    pub seed: u64,
}

impl SamplerConfig {
    pub fn fixed(way: usize, shot: usize, queries_per_class: usize, seed: u64) -> Self {
        Self {
            way: Count::Fixed(way),
            shot: Count::Fixed(shot),
            queries_per_class,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), EpisodeError> {
        let bad = |m: String| Err(EpisodeError::Config(m));
        if self.way.min() < 2 {
            return bad(format!("way minimum {} < 2", self.way.min()));
        }
        if self.shot.min() < 1 {
            return bad(format!("shot minimum {} < 1", self.shot.min()));
        }
        if self.way.min() > self.way.max() || self.shot.min() > self.shot.max() {
            return bad("range minimum exceeds maximum".into());
        }
        if self.queries_per_class < 1 {
            return bad("queries_per_class must be at least 1".into());
        }
        Ok(())
    }

    /// Fails early when no episode can be drawn from `ds`.
    pub fn check_feasible(&self, ds: &Dataset) -> Result<(), EpisodeError> {
        self.validate()?;
        let needed = 1 + self.queries_per_class;
        let eligible = (0..ds.num_classes())
            .filter(|&k| ds.class_items(k).len() >= needed)
            .count();
        if eligible < self.way.min() {
            return Err(EpisodeError::Infeasible {
                eligible,
                needed,
                way_min: self.way.min(),
            });
        }
        Ok(())
    }
}

/// Independent random stream for episode `index` under `seed`.
pub fn episode_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// One few-shot task. Labels are remapped to `0..way` in the order of
/// `classes`; support items are grouped by class.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub domain_name: String,
    pub way: usize,
    pub shots: Vec<usize>,
    /// Dataset labels of the episode classes.
    pub classes: Vec<usize>,
    pub support_indices: Vec<usize>,
    pub support_labels: Vec<usize>,
    pub query_indices: Vec<usize>,
    pub query_labels: Vec<usize>,
    pub support: Tensor,
    pub query: Tensor,
}

impl Episode {
    pub fn support_len(&self) -> usize {
        self.support_labels.len()
    }

    pub fn query_len(&self) -> usize {
        self.query_labels.len()
    }
}

pub fn sample_episode<R: Rng>(ds: &Dataset, cfg: &SamplerConfig, rng: &mut R) -> Result<Episode, EpisodeError> {
    cfg.check_feasible(ds)?;
    let q = cfg.queries_per_class;
    let eligible: Vec<usize> = (0..ds.num_classes())
        .filter(|&k| ds.class_items(k).len() > q)
        .collect();
    let way = cfg.way.draw(rng).min(eligible.len());
    let shot = cfg.shot.draw(rng);
    let mut classes: Vec<usize> = sample(rng, eligible.len(), way).into_iter().map(|i| eligible[i]).collect();
    classes.sort_unstable();

    let mut ep = Episode {
        domain_name: ds.domain_name.clone(),
        way,
        shots: Vec::with_capacity(way),
        classes,
        support_indices: Vec::new(),
        support_labels: Vec::new(),
        query_indices: Vec::new(),
        query_labels: Vec::new(),
        support: Tensor::scalar(0.0),
        query: Tensor::scalar(0.0),
    };
    for (label, &class) in ep.classes.iter().enumerate() {
        let items = ds.class_items(class);
        let n = shot.min(items.len() - q);
        let picked = sample(rng, items.len(), n + q);
        for (j, i) in picked.into_iter().enumerate() {
            if j < n {
                ep.support_indices.push(items[i]);
                ep.support_labels.push(label);
            } else {
                ep.query_indices.push(items[i]);
                ep.query_labels.push(label);
            }
        }
        ep.shots.push(n);
    }
    ep.support = ds.gather(&ep.support_indices);
    ep.query = ds.gather(&ep.query_indices);
    Ok(ep)
}

/// A broken episode invariant.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    Overlap { index: usize },
    Duplicate { index: usize },
    ClassCoverage { class: usize, set: &'static str },
    LabelRange { label: usize, way: usize },
    ShotCount { class: usize, declared: usize, found: usize },
    Shape { set: &'static str },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Overlap { index } => write!(f, "overlap: item {index} is in both support and query"),
            Violation::Duplicate { index } => write!(f, "duplicate: item {index} drawn twice"),
            Violation::ClassCoverage { class, set } => write!(f, "class coverage: class {class} missing from {set}"),
            Violation::LabelRange { label, way } => write!(f, "label range: {label} outside 0..{way}"),
            Violation::ShotCount { class, declared, found } => {
                write!(f, "shot count: class {class} declares {declared}, has {found}")
            }
            Violation::Shape { set } => write!(f, "shape: {set} tensor does not match its labels"),
        }
    }
}

pub fn validate_episode(ep: &Episode) -> Result<(), Vec<Violation>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for &i in &ep.support_indices {
        if !seen.insert(i) {
            out.push(Violation::Duplicate { index: i });
        }
    }
    let mut seen_query = HashSet::new();
    for &i in &ep.query_indices {
        if seen.contains(&i) {
            out.push(Violation::Overlap { index: i });
        } else if !seen_query.insert(i) {
            out.push(Violation::Duplicate { index: i });
        }
    }
    for (set, labels) in [("support", &ep.support_labels), ("query", &ep.query_labels)] {
        let mut count = vec![0; ep.way];
        for &l in labels.iter() {
            match count.get_mut(l) {
                Some(c) => *c += 1,
                None => out.push(Violation::LabelRange { label: l, way: ep.way }),
            }
        }
        for (class, &c) in count.iter().enumerate() {
            if c == 0 {
                out.push(Violation::ClassCoverage { class, set });
            }
            if set == "support" && ep.shots.get(class) != Some(&c) {
                out.push(Violation::ShotCount {
                    class,
                    declared: ep.shots.get(class).copied().unwrap_or(0),
                    found: c,
                });
            }
        }
    }
    for (set, t, n, idx) in [
        ("support", &ep.support, ep.support_labels.len(), ep.support_indices.len()),
        ("query", &ep.query, ep.query_labels.len(), ep.query_indices.len()),
    ] {
        if t.shape().first() != Some(&n) || n != idx {
            out.push(Violation::Shape { set });
        }
    }
    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::Split;

    /// `classes` classes with the given sizes; item value = its index.
    fn dataset(sizes: &[usize]) -> Dataset {
        let labels: Vec<usize> = sizes.iter().enumerate().flat_map(|(k, &n)| vec![k; n]).collect();
        let data = (0..labels.len()).map(|i| i as f64).collect();
        Dataset::new("toy", Split::Test, vec![1], data, labels).unwrap()
    }

    #[test]
    fn five_way_one_shot() {
        let ds = dataset(&[20; 10]);
        let ep = sample_episode(&ds, &SamplerConfig::fixed(5, 1, 15, 0), &mut episode_rng(0, 0)).unwrap();
        assert_eq!(ep.support_len(), 5);
        assert_eq!(ep.query_len(), 75);
        assert_eq!(ep.support.shape(), &[5, 1]);
        assert_eq!(ep.query.shape(), &[75, 1]);
        validate_episode(&ep).unwrap();
    }

    #[test]
    fn five_way_five_shot() {
        let ds = dataset(&[20; 10]);
        let ep = sample_episode(&ds, &SamplerConfig::fixed(5, 5, 15, 0), &mut episode_rng(0, 1)).unwrap();
        assert_eq!(ep.support_len(), 25);
        assert_eq!(ep.query_len(), 75);
        assert_eq!(ep.shots, vec![5; 5]);
        // materialised items match their indices
        for (r, &i) in ep.support_indices.iter().enumerate() {
            assert_eq!(ep.support.row(r), &[i as f64]);
        }
    }

    #[test]
    fn small_class_is_clamped_or_excluded_never_reused() {
        // class 0 has 3 items: with Q = 15 it is ineligible; class 1 has 17 so N clamps to 2
        let ds = dataset(&[3, 17, 30, 30, 30]);
        let cfg = SamplerConfig::fixed(4, 5, 15, 0);
        for e in 0..200 {
            let ep = sample_episode(&ds, &cfg, &mut episode_rng(3, e)).unwrap();
            assert!(!ep.classes.contains(&0));
            if let Some(pos) = ep.classes.iter().position(|&c| c == 1) {
                assert_eq!(ep.shots[pos], 2);
            }
            let mut all: Vec<usize> = ep.support_indices.iter().chain(&ep.query_indices).copied().collect();
            let n = all.len();
            all.sort_unstable();
            all.dedup();
            assert_eq!(all.len(), n);
            for (&i, &l) in ep.support_indices.iter().zip(&ep.support_labels) {
                assert_eq!(ds.label(i), ep.classes[l]);
            }
        }
        // a 3-item class with Q = 1 is eligible and its shot clamps to 2
        let cfg = SamplerConfig::fixed(5, 5, 1, 0);
        let ep = sample_episode(&ds, &cfg, &mut episode_rng(0, 0)).unwrap();
        assert_eq!(ep.shots[0], 2);
        validate_episode(&ep).unwrap();
    }

    #[test]
    fn too_few_eligible_classes() {
        let ds = dataset(&[3, 3, 30]);
        let err = sample_episode(&ds, &SamplerConfig::fixed(2, 1, 15, 0), &mut episode_rng(0, 0)).unwrap_err();
        assert_eq!(
            err,
            EpisodeError::Infeasible {
                eligible: 1,
                needed: 16,
                way_min: 2
            }
        );
    }

    #[test]
    fn way_clamps_to_eligible() {
        let ds = dataset(&[20; 4]);
        let cfg = SamplerConfig {
            way: Count::Range([10, 10]),
            ..SamplerConfig::fixed(2, 1, 15, 0)
        };
        assert!(sample_episode(&ds, &cfg, &mut episode_rng(0, 0)).is_err());
        let cfg = SamplerConfig {
            way: Count::Range([3, 10]),
            ..cfg
        };
        for e in 0..50 {
            let ep = sample_episode(&ds, &cfg, &mut episode_rng(0, e)).unwrap();
            assert!((3..=4).contains(&ep.way));
        }
    }

    #[test]
    fn overlap_violation() {
        let ds = dataset(&[20; 5]);
        let mut ep = sample_episode(&ds, &SamplerConfig::fixed(5, 1, 15, 0), &mut episode_rng(0, 0)).unwrap();
        ep.query_indices[3] = ep.support_indices[0];
        let v = validate_episode(&ep).unwrap_err();
        assert!(v.contains(&Violation::Overlap { index: ep.support_indices[0] }));
        assert!(v[0].to_string().starts_with("overlap"));
    }

    #[test]
    fn coverage_violation() {
        let ds = dataset(&[20; 5]);
        let mut ep = sample_episode(&ds, &SamplerConfig::fixed(5, 1, 15, 0), &mut episode_rng(0, 0)).unwrap();
        for l in ep.query_labels.iter_mut().filter(|l| **l == 2) {
            *l = 0;
        }
        let v = validate_episode(&ep).unwrap_err();
        assert_eq!(v, vec![Violation::ClassCoverage { class: 2, set: "query" }]);
        assert!(v[0].to_string().starts_with("class coverage"));
    }

    #[test]
    fn same_seed_same_stream() {
        let ds = dataset(&[25; 12]);
        let cfg = SamplerConfig {
            way: Count::Range([2, 8]),
            shot: Count::Range([1, 5]),
            queries_per_class: 4,
            seed: 0,
        };
        let a: Vec<_> = (0..20).map(|e| sample_episode(&ds, &cfg, &mut episode_rng(9, e)).unwrap()).collect();
        let b: Vec<_> = (0..20).map(|e| sample_episode(&ds, &cfg, &mut episode_rng(9, e)).unwrap()).collect();
        assert_eq!(a, b);
        assert_ne!(a[0], sample_episode(&ds, &cfg, &mut episode_rng(10, 0)).unwrap());
    }

    #[test]
    fn config_validation_and_json() {
        assert!(SamplerConfig::fixed(1, 1, 1, 0).validate().is_err());
        assert!(SamplerConfig::fixed(2, 0, 1, 0).validate().is_err());
        assert!(SamplerConfig::fixed(2, 1, 0, 0).validate().is_err());
        let cfg: SamplerConfig = serde_json::from_str(r#"{"way":[2,10],"shot":5}"#).unwrap();
        assert_eq!(cfg.way, Count::Range([2, 10]));
        assert_eq!(cfg.shot, Count::Fixed(5));
        assert_eq!(cfg.queries_per_class, 15);
        assert!(serde_json::from_str::<SamplerConfig>(r#"{"way":5,"shot":5,"querys":3}"#).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]
            #[test]
            fn sampled_episodes_are_valid(
                sizes in proptest::collection::vec(1usize..30, 2..12),
                way_lo in 2usize..5,
                way_span in 0usize..5,
                shot_lo in 1usize..4,
                shot_span in 0usize..6,
                q in 1usize..6,
                seed in any::<u64>(),
            ) {
                let ds = dataset(&sizes);
                let cfg = SamplerConfig {
                    way: Count::Range([way_lo, way_lo + way_span]),
                    shot: Count::Range([shot_lo, shot_lo + shot_span]),
                    queries_per_class: q,
                    seed,
                };
                match sample_episode(&ds, &cfg, &mut episode_rng(seed, 0)) {
                    Ok(ep) => {
                        prop_assert!(validate_episode(&ep).is_ok());
                        prop_assert!(ep.way >= way_lo && ep.way <= way_lo + way_span);
                        prop_assert_eq!(ep.query_len(), ep.way * q);
                    }
                    Err(EpisodeError::Infeasible { eligible, .. }) => prop_assert!(eligible < way_lo),
                    Err(e) => prop_assert!(false, "{e}"),
                }
            }
        }
    }
}
