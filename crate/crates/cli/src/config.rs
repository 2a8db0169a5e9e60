//! Experiment configuration: strict JSON parsing, validation, seed
//! derivation, and the resolved-config digest.

use std::fmt;
use std::path::{Path, PathBuf};

use pmf_core::backbone::BackboneSpec;
use pmf_core::dataio::{apply_domain_shift, generate_synthetic, load_idx, split_classes, DomainShift, Splits, SyntheticSpec};
use pmf_core::episodes::SamplerConfig;
use pmf_core::finetune::FineTunePolicy;
use pmf_core::pretrain::{AugmentPolicy, PretrainConfig};
use pmf_core::protonet::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// A configuration problem, reported with the offending field path.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxSource {
    pub images: PathBuf,
    pub labels: PathBuf,
}

/// Exactly one of `synthetic` or `idx`, optionally followed by a shift
/// applied to every split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idx: Option<IdxSource>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shift: Option<DomainShift>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
    /// Cosine temperature of readout evaluation.
    pub temperature: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 600,
            temperature: 1.0,
        }
    }
}

fn default_sampler() -> SamplerConfig {
    SamplerConfig::fixed(5, 1, 15, 0)
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed. Mixed into every training and evaluation seed below.
    pub seed: u64,
    pub backbone: BackboneSpec,
    pub dataset: DatasetConfig,
    #[serde(default = "default_sampler")]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub augment: AugmentPolicy,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub finetune: FineTunePolicy,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

fn field<E: fmt::Display>(path: &str) -> impl Fn(E) -> ConfigError + '_ {
    move |e| ConfigError(format!("{path}: {e}"))
}

/// Parses and validates a config document. Unknown keys are rejected with
/// their path; syntax errors carry line and column.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        if path == "." || path.is_empty() {
            ConfigError(format!("config: {inner}"))
        } else {
            ConfigError(format!("config: {path}: {inner}"))
        }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
    parse_config_str(&text)
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.backbone.validate().map_err(field("backbone"))?;
        match (&self.dataset.synthetic, &self.dataset.idx) {
            (Some(spec), None) => {
                spec.validate().map_err(field("dataset.synthetic"))?;
                if self.backbone.input_shape != [spec.feature_dim] {
                    return Err(ConfigError(format!(
                        "backbone.input_shape: {:?} does not match dataset.synthetic.feature_dim {}",
                        self.backbone.input_shape, spec.feature_dim
                    )));
                }
            }
            (None, Some(idx)) => {
                for (name, p) in [("dataset.idx.images", &idx.images), ("dataset.idx.labels", &idx.labels)] {
                    if !p.is_file() {
                        return Err(ConfigError(format!("{name}: {} does not exist", p.display())));
                    }
                }
            }
            _ => return Err(ConfigError("dataset: exactly one of `synthetic` or `idx` is required".into())),
        }
        if let Some(DomainShift::SigmaRescale { factor, .. }) = &self.dataset.shift {
            if !(*factor >= 1.0 && factor.is_finite()) {
                return Err(ConfigError(format!("dataset.shift.factor: {factor} must be >= 1")));
            }
        }
        self.sampler.validate().map_err(field("sampler"))?;
        self.pretrain.validate().map_err(field("pretrain"))?;
        self.augment.validate().map_err(field("augment"))?;
        self.train.validate().map_err(field("train"))?;
        self.finetune.validate().map_err(field("finetune"))?;
        if self.eval.episodes == 0 {
            return Err(ConfigError("eval.episodes: must be positive".into()));
        }
        if !(self.eval.temperature > 0.0 && self.eval.temperature.is_finite()) {
            return Err(ConfigError("eval.temperature: must be positive".into()));
        }
        Ok(())
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON form of the resolved config. The output
    /// directory is left out: it does not influence any result.
    pub fn digest(&self) -> String {
        let mut cfg = self.clone();
        cfg.out_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&cfg).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    fn stage_seed(&self, stage: Stage, local: u64) -> u64 {
        splitmix64(self.seed ^ stage as u64).wrapping_add(local)
    }

    pub fn backbone_spec(&self) -> BackboneSpec {
        BackboneSpec {
            seed: self.stage_seed(Stage::Backbone, self.backbone.seed),
            ..self.backbone.clone()
        }
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            seed: self.stage_seed(Stage::Sampler, self.sampler.seed),
            ..self.sampler.clone()
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            seed: self.stage_seed(Stage::Pretrain, self.pretrain.seed),
            ..self.pretrain.clone()
        }
    }

    pub fn augment_policy(&self) -> AugmentPolicy {
        AugmentPolicy {
            seed: self.stage_seed(Stage::Augment, self.augment.seed),
            ..self.augment.clone()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.stage_seed(Stage::Train, self.train.seed),
            ..self.train.clone()
        }
    }

    pub fn finetune_policy(&self) -> FineTunePolicy {
        FineTunePolicy {
            seed: self.stage_seed(Stage::Finetune, self.finetune.seed),
            ..self.finetune.clone()
        }
    }

    /// Loads or generates the dataset and applies the configured shift.
    /// Data seeds are used as written: they name the data, not the run.
    pub fn load_splits(&self) -> pmf_core::Result<Splits> {
        let splits = match (&self.dataset.synthetic, &self.dataset.idx) {
            (Some(spec), _) => generate_synthetic(spec)?,
            (None, Some(idx)) => split_classes(&load_idx(&idx.images, &idx.labels)?)?,
            (None, None) => return Err(pmf_core::Error::Config("dataset: no source".into())),
        };
        match &self.dataset.shift {
            Some(shift) => Ok(splits.map(|ds| apply_domain_shift(ds, shift))?),
            None => Ok(splits),
        }
    }
}

#[derive(Clone, Copy)]
#[repr(u64)]
enum Stage {
    Backbone = 0x6261_636b,
    Sampler = 0x7361_6d70,
    Pretrain = 0x7072_6574,
    Augment = 0x6175_676d,
    Train = 0x7472_6169,
    Finetune = 0x6674_756e,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "seed": 3,
        "backbone": {"kind": "mlp", "input_shape": [8], "hidden_widths": [16], "embed_dim": 4},
        "dataset": {"synthetic": {"feature_dim": 8, "num_classes": 20, "items_per_class": 20, "class_sep": 8.0, "noise_sigma": 1.0}}
    }"#;

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = parse_config_str(MINIMAL).unwrap();
        assert_eq!(cfg.train, TrainConfig::default());
        assert_eq!(cfg.finetune, FineTunePolicy::default());
        assert_eq!(cfg.eval.episodes, 600);
        assert_eq!(cfg.out_dir, PathBuf::from("runs"));
        // the echo parses back to the same config
        let again = parse_config_str(&cfg.to_pretty_json()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.digest(), cfg.digest());
        assert_eq!(cfg.digest().len(), 64);
    }

    #[test]
    fn unknown_key_is_named() {
        let text = MINIMAL.replacen("\"seed\": 3,", "\"seed\": 3, \"train\": {\"learnig_rate\": 0.1},", 1);
        let err = parse_config_str(&text).unwrap_err().to_string();
        assert!(err.contains("learnig_rate"), "{err}");
        assert!(err.contains("train"), "{err}");
    }

    #[test]
    fn lr_grid_without_zero_is_a_constraint_error() {
        let text = MINIMAL.replacen("\"seed\": 3,", "\"seed\": 3, \"finetune\": {\"lr_grid\": [0.01, 0.001]},", 1);
        let err = parse_config_str(&text).unwrap_err().to_string();
        assert!(err.starts_with("finetune:"), "{err}");
        assert!(err.contains("lr_grid"), "{err}");
    }

    #[test]
    fn syntax_error_reports_line() {
        let err = parse_config_str("{\n  \"seed\": 1,\n  oops\n}").unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
    }

    #[test]
    fn missing_idx_file_is_rejected() {
        let text = r#"{"seed": 0,
            "backbone": {"kind": "mlp", "input_shape": [784], "hidden_widths": [8], "embed_dim": 4},
            "dataset": {"idx": {"images": "/nonexistent/images.idx", "labels": "/nonexistent/labels.idx"}}}"#;
        let err = parse_config_str(text).unwrap_err().to_string();
        assert!(err.starts_with("dataset.idx.images"), "{err}");
    }

    #[test]
    fn both_or_neither_source_rejected() {
        let text = MINIMAL.replacen("\"synthetic\"", "\"idx\": {\"images\": \"a\", \"labels\": \"b\"}, \"synthetic\"", 1);
        assert!(parse_config_str(&text).is_err());
        let text = r#"{"seed": 0, "backbone": {"kind": "mlp", "input_shape": [8], "hidden_widths": [], "embed_dim": 4}, "dataset": {}}"#;
        assert!(parse_config_str(text).unwrap_err().to_string().contains("exactly one"));
    }

    #[test]
    fn master_seed_changes_stage_seeds_but_not_data() {
        let a = parse_config_str(MINIMAL).unwrap();
        let mut b = a.clone();
        b.seed = 4;
        assert_ne!(a.train_config().seed, b.train_config().seed);
        assert_ne!(a.backbone_spec().seed, b.backbone_spec().seed);
        assert_ne!(a.train_config().seed, a.pretrain_config().seed);
        assert_eq!(a.load_splits().unwrap().test.labels(), b.load_splits().unwrap().test.labels());
    }
}
