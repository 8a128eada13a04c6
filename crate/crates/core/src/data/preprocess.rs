//! Splits, global contrast normalization, ZCA whitening, and dataset caching.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{Dataset, Split};
use crate::container::{write_atomic, Reader, Writer};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const GCN_STD_FLOOR: f64 = 1e-8;
pub const ZCA_EPSILON: f64 = 1e-5;

/// Seeded shuffle, then the first `round(fraction * n)` samples become the
/// validation set. Both parts keep the source order of their members.
pub fn split_validation<T: Scalar>(data: &Dataset<T>, fraction: f64, seed: u64) -> Result<(Dataset<T>, Dataset<T>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("validation fraction {fraction} outside (0, 1)")));
    }
    if !matches!(data.split(), Split::Full | Split::Train) {
        return Err(Error::InvalidArgument(format!("cannot carve a validation set from {} data", data.split())));
    }
    let n = data.len();
    let n_val = (fraction * n as f64).round() as usize;
    if n_val == 0 || n_val == n {
        return Err(Error::EmptyDataset(format!("{n} samples split at {fraction} leaves a side empty")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut val_idx = order[..n_val].to_vec();
    let mut train_idx = order[n_val..].to_vec();
    val_idx.sort_unstable();
    train_idx.sort_unstable();
    let tag = format!("split(val={fraction},seed={seed})");
    let mut train = data.subset(&train_idx).with_provenance(tag.clone());
    let mut val = data.subset(&val_idx).with_provenance(tag);
    train.set_split(Split::Train);
    val.set_split(Split::Val);
    Ok((train, val))
}

/// Per-sample global contrast normalization: subtract the mean, divide by
/// `max(std, floor)`.
pub fn gcn<T: Scalar>(data: &Dataset<T>) -> Dataset<T> {
    let mut out = data.clone();
    let d = out.samples().inner_len();
    for s in 0..out.len() {
        let x = out.samples_mut().outer_slice_mut(s);
        if x.iter().all(|&v| v == x[0]) {
            // exact zero, not rounding residue amplified by the floor
            x.fill(T::zero());
            continue;
        }
        let mean = x.iter().map(|v| v.as_f64()).sum::<f64>() / d as f64;
        let var = x.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / d as f64;
        let scale = var.sqrt().max(GCN_STD_FLOOR);
        for v in x.iter_mut() {
            *v = T::of((v.as_f64() - mean) / scale);
        }
    }
    out.push_provenance(format!("gcn(std_floor={GCN_STD_FLOOR:e})"));
    out
}

/// `x -> W (x - mean)` with `W = U diag(1/sqrt(lambda + eps)) U^T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZcaTransform {
    pub mean: Vec<f64>,
    /// Row-major `d x d`, symmetric.
    pub whitening: Vec<f64>,
    pub epsilon: f64,
    pub fitted_on: Vec<String>,
}

impl ZcaTransform {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Fits ZCA on a training set (population covariance). Validation and test
/// sets are refused so their statistics never leak into preprocessing.
pub fn zca_fit<T: Scalar>(train: &Dataset<T>) -> Result<ZcaTransform> {
    zca_fit_with(train, ZCA_EPSILON)
}

pub fn zca_fit_with<T: Scalar>(train: &Dataset<T>, epsilon: f64) -> Result<ZcaTransform> {
    if train.is_empty() {
        return Err(Error::EmptyDataset("zca fit".into()));
    }
    if !matches!(train.split(), Split::Full | Split::Train) {
        return Err(Error::InvalidArgument(format!(
            "whitening must be fitted on training data, got {} data",
            train.split()
        )));
    }
    let n = train.len();
    let d = train.samples().inner_len();
    let mut mean = vec![0.0; d];
    for s in 0..n {
        for (m, v) in mean.iter_mut().zip(train.sample(s)) {
            *m += v.as_f64();
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, d, |s, j| train.sample(s)[j].as_f64() - mean[j]);
    let cov = (centered.transpose() * &centered) / n as f64;
    let eig = SymmetricEigen::new(cov);
    let scale = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / (l.max(0.0) + epsilon).sqrt()));
    let w = &eig.eigenvectors * scale * eig.eigenvectors.transpose();
    let w = (&w + w.transpose()) * 0.5;
    let mut whitening = Vec::with_capacity(d * d);
    for r in 0..d {
        for c in 0..d {
            whitening.push(w[(r, c)]);
        }
    }
    let mut fitted_on = train.provenance().to_vec();
    fitted_on.push(format!("split={}", train.split()));
    Ok(ZcaTransform {
        mean,
        whitening,
        epsilon,
        fitted_on,
    })
}

pub fn zca_apply<T: Scalar>(t: &ZcaTransform, data: &Dataset<T>) -> Result<Dataset<T>> {
    let d = t.dim();
    if data.samples().inner_len() != d {
        return Err(Error::Shape(format!(
            "transform is {d}-dimensional, samples have {} values",
            data.samples().inner_len()
        )));
    }
    let n = data.len();
    let mut centered = Vec::with_capacity(n * d);
    for s in 0..n {
        centered.extend(data.sample(s).iter().zip(&t.mean).map(|(v, m)| v.as_f64() - m));
    }
    let mut white = vec![0.0; n * d];
    // rows are samples; W is symmetric so x W == (W x)^T
    f64::gemm(n, d, d, &centered, (d, 1), &t.whitening, (d, 1), 0.0, &mut white, (d, 1));
    let mut out = data.clone();
    *out.samples_mut() = Tensor::new(data.samples().shape().to_vec(), white.into_iter().map(T::of).collect())?;
    out.push_provenance(format!("zca(eps={:e},fit=[{}])", t.epsilon, t.fitted_on.join(";")));
    Ok(out)
}

const DATASET_KIND: &str = "dataset";

#[derive(Debug, Serialize, Deserialize)]
struct DatasetHeader {
    precision: crate::scalar::Precision,
    shape: Vec<usize>,
    classes: usize,
    split: Split,
    provenance: Vec<String>,
}

/// Caches a (preprocessed) dataset in the checkpoint container format.
pub fn save_dataset<T: Scalar>(data: &Dataset<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut w = Writer::new();
    w.values("samples", data.samples().data());
    w.u32s("labels", data.labels().iter().map(|&l| l as u32));
    let header = DatasetHeader {
        precision: T::PRECISION,
        shape: data.samples().shape().to_vec(),
        classes: data.classes(),
        split: data.split(),
        provenance: data.provenance().to_vec(),
    };
    write_atomic(path.as_ref(), &w.finish(DATASET_KIND, json!(header))?)
}

pub fn load_dataset<T: Scalar>(path: impl AsRef<Path>) -> Result<Dataset<T>> {
    let r = Reader::read(path.as_ref())?;
    if r.kind() != DATASET_KIND {
        return Err(Error::format(path.as_ref(), format!("container holds a {}, not a dataset", r.kind())));
    }
    let h: DatasetHeader = serde_json::from_value(r.meta().clone())?;
    if h.precision != T::PRECISION {
        return Err(Error::Precision {
            found: h.precision.to_string(),
            requested: T::PRECISION.to_string(),
        });
    }
    let len = h.shape.iter().product();
    let samples = Tensor::new(h.shape, r.values("samples", len)?)?;
    let labels = r.u32s("labels")?.into_iter().map(|l| l as usize).collect();
    let mut data = Dataset::new(samples, labels, h.classes)?.with_split(h.split);
    for p in h.provenance {
        data.push_provenance(p);
    }
    Ok(data)
}
