use std::path::PathBuf;

use structprune::data::{gcn, load_cifar10_batches, load_idx, split_validation, zca_apply, zca_fit, Dataset, Split};
use structprune::{Error, Result, Scalar};

use crate::config::{DatasetConfig, DatasetKind};

pub struct Splits<T> {
    pub train: Dataset<T>,
    pub val: Dataset<T>,
    pub test: Option<Dataset<T>>,
}

fn limit<T: Scalar>(d: Dataset<T>, n: Option<usize>) -> Dataset<T> {
    match n {
        Some(n) if n < d.len() => d.head(n),
        _ => d,
    }
}

fn paths(cfg: &DatasetConfig) -> Result<(Vec<PathBuf>, Option<Vec<PathBuf>>)> {
    let dir = || cfg.dir.clone().ok_or_else(|| Error::InvalidArgument("dataset.dir is required".into()));
    Ok(match cfg.kind {
        DatasetKind::Mnist => {
            let d = dir()?;
            (
                vec![d.join("train-images-idx3-ubyte"), d.join("train-labels-idx1-ubyte")],
                Some(vec![d.join("t10k-images-idx3-ubyte"), d.join("t10k-labels-idx1-ubyte")]),
            )
        }
        DatasetKind::Idx => {
            let need = |p: &Option<PathBuf>, what: &str| {
                p.clone().ok_or_else(|| Error::InvalidArgument(format!("dataset.{what} is required")))
            };
            let test = match (&cfg.test_images, &cfg.test_labels) {
                (Some(i), Some(l)) => Some(vec![i.clone(), l.clone()]),
                _ => None,
            };
            (vec![need(&cfg.train_images, "train_images")?, need(&cfg.train_labels, "train_labels")?], test)
        }
        DatasetKind::Cifar10 => {
            let d = dir()?;
            (
                (1..=5).map(|i| d.join(format!("data_batch_{i}.bin"))).collect(),
                Some(vec![d.join("test_batch.bin")]),
            )
        }
    })
}

fn read<T: Scalar>(kind: DatasetKind, files: &[PathBuf]) -> Result<Dataset<T>> {
    match kind {
        DatasetKind::Cifar10 => load_cifar10_batches(files),
        _ => load_idx(&files[0], &files[1]),
    }
}

/// Loads, splits and preprocesses the configured dataset. Whitening is
/// fitted on the training part only.
pub fn load<T: Scalar>(cfg: &DatasetConfig, with_test: bool) -> Result<Splits<T>> {
    let (train_files, test_files) = paths(cfg)?;
    let full = limit(read::<T>(cfg.kind, &train_files)?.with_split(Split::Full), cfg.train_limit);
    let (mut train, mut val) = split_validation(&full, cfg.val_fraction, cfg.split_seed)?;
    let mut test = match (with_test, test_files) {
        (true, Some(files)) => Some(limit(read::<T>(cfg.kind, &files)?.with_split(Split::Test), cfg.test_limit)),
        _ => None,
    };
    if cfg.gcn {
        train = gcn(&train);
        val = gcn(&val);
        test = test.map(|t| gcn(&t));
    }
    if cfg.zca {
        let z = zca_fit(&train)?;
        train = zca_apply(&z, &train)?;
        val = zca_apply(&z, &val)?;
        test = test.map(|t| zca_apply(&z, &t)).transpose()?;
    }
    log::info!(
        "data: {} train, {} val, {} test",
        train.len(),
        val.len(),
        test.as_ref().map_or(0, |t| t.len())
    );
    Ok(Splits { train, val, test })
}
