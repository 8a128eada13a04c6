use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use structprune::arch::Padding;
use structprune::network::ConvRange;
use structprune::pruning::{Criterion, Granularity};
use structprune::trainer::TrainConfig;
use structprune::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    /// Official MNIST IDX file names under `dir`.
    Mnist,
    /// CIFAR-10 binary batches under `dir`.
    Cifar10,
    /// Explicit IDX image/label paths.
    Idx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub dir: Option<PathBuf>,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    /// Fraction of the training file held out for validation.
    pub val_fraction: f64,
    pub split_seed: u64,
    /// Use only the first `n` samples of the training file (before the split).
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    pub gcn: bool,
    pub zca: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            kind: DatasetKind::Mnist,
            dir: None,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            val_fraction: 0.2,
            split_seed: 0,
            train_limit: None,
            test_limit: None,
            gcn: false,
            zca: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PruneSection {
    pub granularity: Granularity,
    pub ratio: f64,
    /// Per-layer ratios over `layer_range`; overrides `ratio`.
    pub ratios: Option<Vec<f64>>,
    /// Best-of-N candidate count.
    pub candidates: usize,
    pub layer_range: Option<ConvRange>,
    pub seed: u64,
    pub criterion: Criterion,
    pub allow_orphans: bool,
    pub dedup: bool,
    pub workers: Option<usize>,
    /// 1 = one-shot.
    pub steps: usize,
}

impl Default for PruneSection {
    fn default() -> Self {
        PruneSection {
            granularity: Granularity::Kernel,
            ratio: 0.5,
            ratios: None,
            candidates: 100,
            layer_range: None,
            seed: 0,
            criterion: Criterion::BestOfN,
            allow_orphans: false,
            dedup: false,
            workers: None,
            steps: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub architecture: String,
    /// `[maps, H, W]`; taken from the dataset when absent.
    pub input_shape: Option<[usize; 3]>,
    pub padding: Padding,
    pub init_seed: u64,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    /// Retraining after pruning; defaults to the training settings.
    pub retrain: Option<TrainConfig>,
    pub prune: PruneSection,
    pub output: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            architecture: "1x6(C5)-6x16(C5)-16x120(C5)-84-10".into(),
            input_shape: None,
            padding: Padding::Valid,
            init_seed: 0,
            dataset: DatasetConfig::default(),
            train: TrainConfig::default(),
            retrain: None,
            prune: PruneSection::default(),
            output: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::InvalidArgument(format!("config {}: {e}", path.display())))
    }

    pub fn retrain_config(&self) -> TrainConfig {
        self.retrain.clone().unwrap_or_else(|| self.train.clone())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if let Some(r) = &self.retrain {
            r.validate()?;
        }
        let d = &self.dataset;
        if !(d.val_fraction > 0.0 && d.val_fraction < 1.0) {
            return Err(Error::InvalidArgument(format!("val_fraction {} outside (0, 1)", d.val_fraction)));
        }
        match d.kind {
            DatasetKind::Mnist | DatasetKind::Cifar10 if d.dir.is_none() => {
                return Err(Error::InvalidArgument("dataset.dir is required".into()))
            }
            DatasetKind::Idx if d.train_images.is_none() || d.train_labels.is_none() => {
                return Err(Error::InvalidArgument("idx datasets need train_images and train_labels".into()))
            }
            _ => {}
        }
        let p = &self.prune;
        if !(0.0..=1.0).contains(&p.ratio) {
            return Err(Error::InvalidArgument(format!("pruning ratio {} outside [0, 1]", p.ratio)));
        }
        if p.candidates == 0 || p.steps == 0 {
            return Err(Error::InvalidArgument("candidates and steps must be positive".into()));
        }
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join("config.json");
        std::fs::write(&path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_json_fills_defaults() {
        let c: ExperimentConfig = serde_json::from_str(r#"{"dataset": {"kind": "idx"}, "prune": {"ratio": 0.3}}"#).unwrap();
        assert_eq!(c.dataset.kind, DatasetKind::Idx);
        assert_eq!(c.prune.ratio, 0.3);
        assert_eq!(c.prune.candidates, 100);
        assert_eq!(c.train, TrainConfig::default());
        let back: ExperimentConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn validation_rejects_bad_values() {
        let mut c = ExperimentConfig::default();
        assert!(c.validate().is_err()); // no data dir
        c.dataset.dir = Some("d".into());
        assert!(c.validate().is_ok());
        c.prune.ratio = 1.5;
        assert!(c.validate().is_err());
        c.prune.ratio = 0.5;
        c.dataset.val_fraction = 0.0;
        assert!(c.validate().is_err());
    }
}
