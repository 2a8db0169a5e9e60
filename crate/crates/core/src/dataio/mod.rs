//! Labelled datasets, class-disjoint splits, and the data sources that feed
//! them: a seeded synthetic generator, domain shifts, and IDX files.

mod idx;
mod shift;
mod synthetic;

pub use idx::{load_idx, parse_idx, read_idx_header, IdxHeader, IDX_IMAGE_MAGIC, IDX_LABEL_MAGIC};
pub use shift::{apply_domain_shift, DomainShift, ResolvedShift};
pub use synthetic::{generate_synthetic, SyntheticSpec};

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

/// Smallest class count per split that still allows 5-way episodes.
pub const MIN_CLASSES_PER_SPLIT: usize = 5;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid data spec: {0}")]
    Spec(String),
    #[error("{what}: bad magic {found:#010x} (expected {expected:#010x})")]
    BadMagic {
        what: &'static str,
        expected: u32,
        found: u32,
    },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("{what} truncated: expected {expected} bytes, found {found}")]
    Truncated {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("item has {found} values, expected {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("{found} classes cannot form train/val/test splits of at least {MIN_CLASSES_PER_SPLIT} classes (need {needed})")]
    TooFewClasses { needed: usize, found: usize },
    #[error("labels must cover 0..{classes} with at least one item each; class {missing} is empty")]
    EmptyClass { classes: usize, missing: usize },
    #[error("data io: {0}")]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, DataError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    /// A source that has not been divided into class-disjoint splits yet.
    Whole,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Whole => "whole",
        })
    }
}

/// Immutable labelled item collection. Labels are contiguous `0..K` and
/// `source_classes[k]` records the class id each label came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub domain_name: String,
    pub split: Split,
    item_shape: Vec<usize>,
    data: Vec<f64>,
    labels: Vec<usize>,
    class_index: Vec<Vec<usize>>,
    source_classes: Vec<usize>,
}

impl Dataset {
    /// Builds a dataset from flat item storage. Labels must use every value
    /// in `0..=max(label)`.
    pub fn new(
        domain_name: impl Into<String>,
        split: Split,
        item_shape: Vec<usize>,
        data: Vec<f64>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let item_len: usize = item_shape.iter().product();
        if item_len == 0 || data.len() != labels.len() * item_len {
            return Err(DataError::Dimension {
                expected: labels.len() * item_len,
                found: data.len(),
            });
        }
        let classes = labels.iter().max().map_or(0, |m| m + 1);
        let mut class_index = vec![Vec::new(); classes];
        for (i, &l) in labels.iter().enumerate() {
            class_index[l].push(i);
        }
        if let Some(missing) = class_index.iter().position(Vec::is_empty) {
            return Err(DataError::EmptyClass { classes, missing });
        }
        Ok(Self {
            domain_name: domain_name.into(),
            split,
            item_shape,
            data,
            labels,
            class_index,
            source_classes: (0..classes).collect(),
        })
    }

    /// Like [`Dataset::new`] but remaps arbitrary class ids to `0..K` in
    /// ascending id order.
    pub fn with_class_ids(
        domain_name: impl Into<String>,
        split: Split,
        item_shape: Vec<usize>,
        data: Vec<f64>,
        class_ids: &[usize],
    ) -> Result<Self> {
        let mut ids: Vec<usize> = class_ids.to_vec();
        ids.sort_unstable();
        ids.dedup();
        let labels = class_ids
            .iter()
            .map(|c| ids.binary_search(c).expect("present"))
            .collect();
        let mut ds = Self::new(domain_name, split, item_shape, data, labels)?;
        ds.source_classes = ids;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn item_shape(&self) -> &[usize] {
        &self.item_shape
    }

    pub fn item_len(&self) -> usize {
        self.item_shape.iter().product()
    }

    pub fn item(&self, i: usize) -> &[f64] {
        let n = self.item_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.class_index.len()
    }

    pub fn class_items(&self, class: usize) -> &[usize] {
        &self.class_index[class]
    }

    pub fn source_classes(&self) -> &[usize] {
        &self.source_classes
    }

    /// Stacks the given items into a `[n, ...item_shape]` tensor.
    pub fn gather(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.item_len());
        for &i in indices {
            data.extend_from_slice(self.item(i));
        }
        let mut shape = vec![indices.len()];
        shape.extend(&self.item_shape);
        Tensor::new(shape, data).expect("consistent item storage")
    }

    /// The items without their labels.
    pub fn unlabeled(&self) -> UnlabeledItems {
        UnlabeledItems {
            item_shape: self.item_shape.clone(),
            data: self.data.clone(),
        }
    }

    /// Applies `f` to every item; labels and classes are untouched.
    pub fn map_items<F>(&self, domain_name: String, mut f: F) -> Result<Self>
    where
        F: FnMut(&[f64]) -> Vec<f64>,
    {
        let n = self.item_len();
        let mut data = Vec::with_capacity(self.data.len());
        for item in self.data.chunks(n) {
            let out = f(item);
            if out.len() != n {
                return Err(DataError::Dimension {
                    expected: n,
                    found: out.len(),
                });
            }
            data.extend(out);
        }
        Ok(Self {
            domain_name,
            data,
            ..self.clone()
        })
    }

    /// Restriction to the listed classes (in the given order), relabelled `0..len`.
    pub fn subset_classes(&self, classes: &[usize], split: Split) -> Self {
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for (new, &old) in classes.iter().enumerate() {
            for &i in &self.class_index[old] {
                data.extend_from_slice(self.item(i));
                labels.push(new);
            }
        }
        let mut ds = Self::new(self.domain_name.clone(), split, self.item_shape.clone(), data, labels)
            .expect("subset of a valid dataset");
        ds.source_classes = classes.iter().map(|&c| self.source_classes[c]).collect();
        ds
    }
}

/// Items with no labels attached; the only input the pre-training stage sees.
#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledItems {
    item_shape: Vec<usize>,
    data: Vec<f64>,
}

impl UnlabeledItems {
    pub fn len(&self) -> usize {
        self.data.len() / self.item_len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn item_shape(&self) -> &[usize] {
        &self.item_shape
    }

    pub fn item_len(&self) -> usize {
        self.item_shape.iter().product()
    }

    pub fn item(&self, i: usize) -> &[f64] {
        let n = self.item_len();
        &self.data[i * n..(i + 1) * n]
    }

    /// Population standard deviation of every coordinate over all items.
    pub fn feature_std(&self) -> Vec<f64> {
        feature_std(self.data.chunks(self.item_len()), self.item_len())
    }
}

pub(crate) fn feature_std<'a, I>(items: I, len: usize) -> Vec<f64>
where
    I: Iterator<Item = &'a [f64]> + Clone,
{
    let mut mean = vec![0.0; len];
    let mut n = 0usize;
    for item in items.clone() {
        mean.iter_mut().zip(item).for_each(|(m, v)| *m += v);
        n += 1;
    }
    if n == 0 {
        return vec![0.0; len];
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; len];
    for item in items {
        for ((s, v), m) in var.iter_mut().zip(item).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.into_iter().map(|s| (s / n as f64).sqrt()).collect()
}

/// Class-disjoint train / val / test partition of one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl Splits {
    pub fn map<F>(&self, mut f: F) -> Result<Self>
    where
        F: FnMut(&Dataset) -> Result<Dataset>,
    {
        Ok(Self {
            train: f(&self.train)?,
            val: f(&self.val)?,
            test: f(&self.test)?,
        })
    }
}

/// Class counts for a 64:16:20 train/val/test partition of `classes`,
/// with at least [`MIN_CLASSES_PER_SPLIT`] classes in each split.
pub fn split_sizes(classes: usize) -> Result<(usize, usize, usize)> {
    let needed = 3 * MIN_CLASSES_PER_SPLIT;
    if classes < needed {
        return Err(DataError::TooFewClasses {
            needed,
            found: classes,
        });
    }
    let val = ((classes as f64 * 0.16).round() as usize).max(MIN_CLASSES_PER_SPLIT);
    let test = ((classes as f64 * 0.20).round() as usize).max(MIN_CLASSES_PER_SPLIT);
    let train = classes - val - test;
    if train < MIN_CLASSES_PER_SPLIT {
        return Err(DataError::TooFewClasses {
            needed,
            found: classes,
        });
    }
    Ok((train, val, test))
}

/// Partitions the classes of `ds` in label order: the first block trains,
/// the next validates, the rest tests.
pub fn split_classes(ds: &Dataset) -> Result<Splits> {
    let (train, val, _) = split_sizes(ds.num_classes())?;
    let all: Vec<usize> = (0..ds.num_classes()).collect();
    Ok(Splits {
        train: ds.subset_classes(&all[..train], Split::Train),
        val: ds.subset_classes(&all[train..train + val], Split::Val),
        test: ds.subset_classes(&all[train + val..], Split::Test),
    })
}
