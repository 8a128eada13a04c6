//! Datasets: loaders, splits, preprocessing and augmentation.

mod augment;
mod loaders;
mod preprocess;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use augment::{
    augment_crop_flip, crop_view, five_crop_origins, ten_crop_evaluate, ten_crop_predict, ten_crop_probs,
    ten_crop_views,
};
pub use loaders::{load_cifar10, load_cifar10_batches, load_idx, load_mnist, parse_cifar10, parse_idx_images, parse_idx_labels};
pub use preprocess::{
    gcn, load_dataset, save_dataset, split_validation, zca_apply, zca_fit, zca_fit_with, ZcaTransform, GCN_STD_FLOOR,
    ZCA_EPSILON,
};

/// Which partition a dataset came from. Whitening may only be fitted on
/// `Train` (or `Full`, before any split exists).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Full,
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Full => "full",
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// Labeled image samples `[n, maps, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    samples: Tensor<T>,
    labels: Vec<usize>,
    classes: usize,
    split: Split,
    provenance: Vec<String>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(samples: Tensor<T>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if samples.rank() != 4 {
            return Err(Error::Shape(format!("samples must be [n,maps,H,W], got {:?}", samples.shape())));
        }
        if samples.outer() != labels.len() {
            return Err(Error::Shape(format!(
                "{} samples but {} labels",
                samples.outer(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidArgument(format!("label {bad} outside [0, {classes})")));
        }
        Ok(Dataset {
            samples,
            labels,
            classes,
            split: Split::Full,
            provenance: Vec::new(),
        })
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn with_provenance(mut self, tag: impl Into<String>) -> Self {
        self.provenance.push(tag.into());
        self
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }
    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
    pub fn samples(&self) -> &Tensor<T> {
        &self.samples
    }
    pub fn samples_mut(&mut self) -> &mut Tensor<T> {
        &mut self.samples
    }
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
    pub fn classes(&self) -> usize {
        self.classes
    }
    pub fn split(&self) -> Split {
        self.split
    }
    pub fn provenance(&self) -> &[String] {
        &self.provenance
    }

    /// `[maps, H, W]` of one sample.
    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.samples.shape();
        [s[1], s[2], s[3]]
    }

    pub fn sample(&self, i: usize) -> &[T] {
        self.samples.outer_slice(i)
    }

    /// Gathers the listed samples into a new dataset, keeping split and provenance.
    pub fn subset(&self, indices: &[usize]) -> Dataset<T> {
        let (samples, labels) = self.gather(indices);
        Dataset {
            samples,
            labels,
            classes: self.classes,
            split: self.split,
            provenance: self.provenance.clone(),
        }
    }

    /// First `n` samples (all if fewer).
    pub fn head(&self, n: usize) -> Dataset<T> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx).with_provenance(format!("head({n})"))
    }

    /// Batch tensor and labels for the listed samples.
    pub fn gather(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let [c, h, w] = self.sample_shape();
        let mut data = Vec::with_capacity(indices.len() * c * h * w);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.sample(i));
            labels.push(self.labels[i]);
        }
        (
            Tensor::new(vec![indices.len(), c, h, w], data).expect("consistent gather"),
            labels,
        )
    }

    pub fn convert<U: Scalar>(&self) -> Dataset<U> {
        Dataset {
            samples: self.samples.convert(),
            labels: self.labels.clone(),
            classes: self.classes,
            split: self.split,
            provenance: self.provenance.clone(),
        }
    }

    pub(crate) fn set_split(&mut self, split: Split) {
        self.split = split;
    }

    pub(crate) fn push_provenance(&mut self, tag: String) {
        self.provenance.push(tag);
    }
}
