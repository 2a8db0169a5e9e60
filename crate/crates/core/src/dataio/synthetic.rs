use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{split_classes, split_sizes, DataError, Dataset, Split, Splits};

fn default_name() -> String {
    "synthetic".into()
}

/// Gaussian class clusters with means on a sphere.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    #[serde(default = "default_name")]
    pub name: String,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub items_per_class: usize,
    /// Radius of the sphere the class means are drawn on.
    pub class_sep: f64,
    pub noise_sigma: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let fail = |m: String| Err(DataError::Spec(m));
        if self.feature_dim == 0 {
            return fail("feature_dim must be positive".into());
        }
        if self.items_per_class == 0 {
            return fail("items_per_class must be positive".into());
        }
        if !(self.class_sep > 0.0 && self.class_sep.is_finite()) {
            return fail(format!("class_sep {} must be positive", self.class_sep));
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return fail(format!("noise_sigma {} must be positive", self.noise_sigma));
        }
        split_sizes(self.num_classes).map(|_| ())
    }

    /// The class means, in class order.
    pub fn class_means(&self) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.num_classes)
            .map(|_| {
                let z: Vec<f64> = (0..self.feature_dim)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect();
                let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
                z.into_iter().map(|v| v / norm * self.class_sep).collect()
            })
            .collect()
    }
}

/// Draws every class, then splits classes 64:16:20 into train/val/test.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Splits, DataError> {
    spec.validate()?;
    let means = spec.class_means();
    // item noise uses its own stream so means do not depend on items_per_class
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1);
    let mut data = Vec::with_capacity(spec.num_classes * spec.items_per_class * spec.feature_dim);
    let mut labels = Vec::with_capacity(spec.num_classes * spec.items_per_class);
    for (class, mean) in means.iter().enumerate() {
        for _ in 0..spec.items_per_class {
            for &m in mean {
                let z: f64 = StandardNormal.sample(&mut rng);
                data.push(m + spec.noise_sigma * z);
            }
            labels.push(class);
        }
    }
    let all = Dataset::new(spec.name.clone(), Split::Whole, vec![spec.feature_dim], data, labels)?;
    split_classes(&all)
}
