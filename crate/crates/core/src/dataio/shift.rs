use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset};

/// A seeded, label-preserving transformation of every item.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DomainShift {
    /// Shuffles coordinates with a seeded permutation.
    FeaturePermutation { seed: u64 },
    /// Multiplies items by a seeded Haar-random orthogonal matrix.
    OrthogonalRotation { seed: u64 },
    /// Rescales coordinate `i` by `exp(u_i)`, `u_i ~ U(-ln factor, ln factor)`.
    SigmaRescale { factor: f64, seed: u64 },
}

impl DomainShift {
    pub fn name(&self) -> &'static str {
        match self {
            DomainShift::FeaturePermutation { .. } => "feature_permutation",
            DomainShift::OrthogonalRotation { .. } => "orthogonal_rotation",
            DomainShift::SigmaRescale { .. } => "sigma_rescale",
        }
    }

    /// Materialises the transformation for `dim`-dimensional items.
    pub fn resolve(&self, dim: usize) -> Result<ResolvedShift, DataError> {
        match *self {
            DomainShift::FeaturePermutation { seed } => {
                let mut perm: Vec<usize> = (0..dim).collect();
                perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
                Ok(ResolvedShift::Permutation(perm))
            }
            DomainShift::OrthogonalRotation { seed } => Ok(ResolvedShift::Rotation {
                dim,
                matrix: random_orthogonal(dim, seed),
            }),
            DomainShift::SigmaRescale { factor, seed } => {
                if !(factor >= 1.0 && factor.is_finite()) {
                    return Err(DataError::Spec(format!("sigma_rescale factor {factor} must be >= 1")));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let span = factor.ln();
                let scales = (0..dim)
                    .map(|_| {
                        let u = if span > 0.0 { rng.random_range(-span..=span) } else { 0.0 };
                        u.exp()
                    })
                    .collect();
                Ok(ResolvedShift::Rescale(scales))
            }
        }
    }
}

/// A domain shift bound to a dimension.
#[derive(Clone, Debug, PartialEq)]
pub enum ResolvedShift {
    /// `out[i] = x[perm[i]]`
    Permutation(Vec<usize>),
    /// `out = Q x`, row-major `Q`
    Rotation { dim: usize, matrix: Vec<f64> },
    /// `out[i] = s[i] * x[i]`
    Rescale(Vec<f64>),
}

impl ResolvedShift {
    pub fn dim(&self) -> usize {
        match self {
            ResolvedShift::Permutation(p) => p.len(),
            ResolvedShift::Rotation { dim, .. } => *dim,
            ResolvedShift::Rescale(s) => s.len(),
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        match self {
            ResolvedShift::Permutation(p) => p.iter().map(|&j| x[j]).collect(),
            ResolvedShift::Rotation { dim, matrix } => matrix
                .chunks(*dim)
                .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
                .collect(),
            ResolvedShift::Rescale(s) => s.iter().zip(x).map(|(a, b)| a * b).collect(),
        }
    }

    pub fn inverse(&self) -> ResolvedShift {
        match self {
            ResolvedShift::Permutation(p) => {
                let mut inv = vec![0; p.len()];
                for (i, &j) in p.iter().enumerate() {
                    inv[j] = i;
                }
                ResolvedShift::Permutation(inv)
            }
            ResolvedShift::Rotation { dim, matrix } => {
                let mut t = vec![0.0; matrix.len()];
                for i in 0..*dim {
                    for j in 0..*dim {
                        t[j * dim + i] = matrix[i * dim + j];
                    }
                }
                ResolvedShift::Rotation { dim: *dim, matrix: t }
            }
            ResolvedShift::Rescale(s) => ResolvedShift::Rescale(s.iter().map(|v| 1.0 / v).collect()),
        }
    }

    /// Applies the shift to every item of `ds`.
    pub fn apply_to(&self, ds: &Dataset, domain_name: String) -> Result<Dataset, DataError> {
        if ds.item_len() != self.dim() {
            return Err(DataError::Dimension {
                expected: self.dim(),
                found: ds.item_len(),
            });
        }
        ds.map_items(domain_name, |x| self.apply(x))
    }
}

/// Gram-Schmidt (applied twice) on a Gaussian matrix.
fn random_orthogonal(dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows: Vec<Vec<f64>> = (0..dim)
        .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    for i in 0..dim {
        for _ in 0..2 {
            for j in 0..i {
                let dot: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
                let prev = rows[j].clone();
                rows[i].iter_mut().zip(&prev).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = rows[i].iter().map(|v| v * v).sum::<f64>().sqrt();
        rows[i].iter_mut().for_each(|v| *v /= norm);
    }
    rows.concat()
}

/// Applies `shift` to every item; the domain name gains a `+kind` suffix.
pub fn apply_domain_shift(ds: &Dataset, shift: &DomainShift) -> Result<Dataset, DataError> {
    let resolved = shift.resolve(ds.item_len())?;
    resolved.apply_to(ds, format!("{}+{}", ds.domain_name, shift.name()))
}
