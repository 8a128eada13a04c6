//! Mini-batch training with RMSProp and batch normalization. Retraining uses
//! the same loop and additionally checks that pruned connections stay pruned.

mod log;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment_crop_flip, crop_view, Dataset};
use crate::error::{Error, Result};
use crate::layers::{softmax_xent_batch, Connectivity};
use crate::network::{Gradients, Layer, Network};
use crate::scalar::{Precision, Scalar};
use crate::tensor::Tensor;

pub use self::log::{ExperimentLog, LogRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub rmsprop_decay: f64,
    pub rmsprop_epsilon: f64,
    /// `(epoch, multiplier)`: from `epoch` (1-based) on, the rate is
    /// `learning_rate * multiplier`, until the next entry.
    pub lr_schedule: Vec<(usize, f64)>,
    pub seed: u64,
    pub precision: Precision,
    /// Random crop side for train-time augmentation; validation then uses
    /// the center crop.
    pub augment_crop: Option<usize>,
    pub augment_flip: bool,
    /// Stop each epoch after this many mini-batches (desk-scale runs).
    pub max_batches_per_epoch: Option<usize>,
    /// Wall-clock times make logs differ between identical runs; disable for
    /// byte-identical replays.
    pub record_wall_time: bool,
    /// Return the weights of the epoch with the lowest validation MCR
    /// (the starting weights count as epoch 0).
    pub keep_best: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            epochs: 10,
            learning_rate: 1e-3,
            rmsprop_decay: 0.9,
            rmsprop_epsilon: 1e-8,
            lr_schedule: Vec::new(),
            seed: 0,
            precision: Precision::F32,
            augment_crop: None,
            augment_flip: false,
            max_batches_per_epoch: None,
            record_wall_time: true,
            keep_best: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.batch_size < 2 {
            return bad(format!("batch size {} < 2 (batch norm needs two samples)", self.batch_size));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be finite and non-negative", self.learning_rate));
        }
        if !(self.rmsprop_decay > 0.0 && self.rmsprop_decay < 1.0) {
            return bad(format!("rmsprop decay {} outside (0, 1)", self.rmsprop_decay));
        }
        if !(self.rmsprop_epsilon > 0.0) {
            return bad(format!("rmsprop epsilon {} must be positive", self.rmsprop_epsilon));
        }
        if self.lr_schedule.iter().any(|&(e, m)| e == 0 || !(m >= 0.0)) {
            return bad("lr schedule entries need epoch >= 1 and multiplier >= 0".into());
        }
        if self.max_batches_per_epoch == Some(0) {
            return bad("max_batches_per_epoch must be positive".into());
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (1-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let mult = self
            .lr_schedule
            .iter()
            .filter(|(e, _)| *e <= epoch)
            .max_by_key(|(e, _)| *e)
            .map_or(1.0, |(_, m)| *m);
        self.learning_rate * mult
    }
}

/// `s <- d*s + (1-d)*g^2;  p <- p - lr*g/sqrt(s+eps)`, elementwise.
pub fn rmsprop_step<T: Scalar>(params: &mut [T], grads: &[T], state: &mut [T], lr: f64, decay: f64, eps: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.len() {
        return Err(Error::Shape(format!(
            "rmsprop: {} params, {} grads, {} accumulators",
            params.len(),
            grads.len(),
            state.len()
        )));
    }
    let (d, one_minus_d, lr, eps) = (T::of(decay), T::of(1.0 - decay), T::of(lr), T::of(eps));
    for ((p, &g), s) in params.iter_mut().zip(grads).zip(state.iter_mut()) {
        *s = d * *s + one_minus_d * g * g;
        *p -= lr * g / (*s + eps).sqrt();
    }
    Ok(())
}

/// Running mean-square accumulators, one per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    acc: Vec<Vec<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(net: &mut Network<T>) -> Self {
        OptimizerState {
            acc: net.param_lengths().into_iter().map(|n| vec![T::zero(); n]).collect(),
        }
    }

    pub fn accumulators(&self) -> &[Vec<T>] {
        &self.acc
    }

    /// One RMSProp update of every parameter. A non-finite gradient aborts
    /// before anything is modified.
    pub fn step(&mut self, net: &mut Network<T>, grads: &Gradients<T>, cfg: &TrainConfig, lr: f64) -> Result<()> {
        let slices = grads.slices();
        if slices.len() != self.acc.len() {
            return Err(Error::Shape("gradients do not match optimizer state".into()));
        }
        for (i, g) in slices.iter().enumerate() {
            if let Some(j) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of parameter group {i}, element {j}")));
            }
        }
        let mut k = 0;
        let mut result = Ok(());
        net.visit_params_mut(|p| {
            if result.is_ok() {
                result = rmsprop_step(p, slices[k], &mut self.acc[k], lr, cfg.rmsprop_decay, cfg.rmsprop_epsilon);
            }
            k += 1;
        });
        result
    }
}

fn center_crop<T: Scalar>(data: &Dataset<T>, crop: usize) -> Result<Dataset<T>> {
    let [c, h, w] = data.sample_shape();
    if crop > h || crop > w {
        return Err(Error::InvalidArgument(format!("crop {crop} larger than {h}x{w} samples")));
    }
    let (top, left) = ((h - crop) / 2, (w - crop) / 2);
    let mut px = Vec::with_capacity(data.len() * c * crop * crop);
    for s in 0..data.len() {
        px.extend(crop_view(data.sample(s), [c, h, w], top, left, crop, false));
    }
    Ok(Dataset::new(Tensor::new(vec![data.len(), c, crop, crop], px)?, data.labels().to_vec(), data.classes())?
        .with_split(data.split()))
}

/// Connectivity of every conv layer, used to check the mask freeze.
fn connectivity_snapshot<T: Scalar>(net: &Network<T>) -> Vec<Connectivity> {
    net.layers()
        .iter()
        .filter_map(|l| match l {
            Layer::Conv(b) => Some(b.conv().connectivity().clone()),
            _ => None,
        })
        .collect()
}

fn check_frozen<T: Scalar>(net: &Network<T>, snapshot: &[Connectivity]) -> Result<()> {
    for (ci, (block, conn)) in net
        .layers()
        .iter()
        .filter_map(|l| match l {
            Layer::Conv(b) => Some(b),
            _ => None,
        })
        .zip(snapshot)
        .enumerate()
    {
        if block.conv().connectivity() != conn {
            return Err(Error::Mask(format!("Conv{} connectivity changed during retraining", ci + 1)));
        }
        if block.conv().check_invariants().is_err() {
            return Err(Error::Mask(format!("Conv{} has a non-zero pruned kernel", ci + 1)));
        }
    }
    Ok(())
}

fn run<T: Scalar>(
    net: &Network<T>,
    train_set: &Dataset<T>,
    val_set: &Dataset<T>,
    cfg: &TrainConfig,
    stage: &str,
    freeze: bool,
) -> Result<(Network<T>, ExperimentLog)> {
    cfg.validate()?;
    if cfg.precision != T::PRECISION {
        return Err(Error::Precision {
            found: T::PRECISION.to_string(),
            requested: cfg.precision.to_string(),
        });
    }
    if train_set.is_empty() {
        return Err(Error::EmptyDataset("training set".into()));
    }
    if val_set.is_empty() {
        return Err(Error::EmptyDataset("validation set".into()));
    }
    let val_view = match cfg.augment_crop {
        Some(c) => center_crop(val_set, c)?,
        None => val_set.clone(),
    };
    let mut net = net.clone();
    let snapshot = freeze.then(|| connectivity_snapshot(&net));
    let mut log = ExperimentLog::new();
    log.push(LogRecord::Config {
        stage: stage.to_string(),
        config: serde_json::to_value(cfg)?,
    });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = OptimizerState::new(&mut net);
    let mut best = (0usize, net.evaluate_mcr(&val_view)?, net.clone());
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if cfg.max_batches_per_epoch.is_some_and(|m| b >= m) {
                break;
            }
            if chunk.len() < 2 {
                continue;
            }
            let (mut x, labels) = train_set.gather(chunk);
            if let Some(c) = cfg.augment_crop {
                x = augment_crop_flip(&x, c, cfg.augment_flip, &mut rng)?;
            }
            let (logits, tape) = net.forward_train(&x)?;
            let (loss, grad) = softmax_xent_batch(&logits, &labels)?;
            let grads = net.backward(&tape, grad)?;
            opt.step(&mut net, &grads, cfg, lr)?;
            if let Some(s) = &snapshot {
                check_frozen(&net, s)?;
            }
            loss_sum += loss.as_f64() * chunk.len() as f64;
            seen += chunk.len();
        }
        net.meta_mut().epochs_trained += 1;
        let val_mcr = net.evaluate_mcr(&val_view)?;
        let train_loss = if seen > 0 { loss_sum / seen as f64 } else { f64::NAN };
        if !train_loss.is_finite() {
            return Err(Error::NonFinite(format!("{stage} loss in epoch {epoch}")));
        }
        ::log::info!("{stage} epoch {epoch}: loss {train_loss:.4}, val MCR {val_mcr:.2}%");
        log.push(LogRecord::Epoch {
            stage: stage.to_string(),
            epoch,
            train_loss,
            val_mcr,
            lr,
            wall_ms: cfg.record_wall_time.then(|| started.elapsed().as_secs_f64() * 1e3),
        });
        if val_mcr < best.1 {
            best = (epoch, val_mcr, net.clone());
        }
    }
    let final_net = if cfg.keep_best {
        log.push(LogRecord::Best {
            stage: stage.to_string(),
            epoch: best.0,
            val_mcr: best.1,
        });
        let mut kept = best.2;
        kept.meta_mut().epochs_trained = net.meta().epochs_trained;
        kept
    } else {
        net
    };
    Ok((final_net, log))
}

/// Trains a copy of `net`; the input network is not modified.
pub fn train<T: Scalar>(
    net: &Network<T>,
    train_set: &Dataset<T>,
    val_set: &Dataset<T>,
    cfg: &TrainConfig,
) -> Result<(Network<T>, ExperimentLog)> {
    run(net, train_set, val_set, cfg, "train", false)
}

/// As [`train`], for a pruned network: connectivity flags must not change
/// and pruned kernels must stay exactly zero after every step.
pub fn retrain<T: Scalar>(
    net: &Network<T>,
    train_set: &Dataset<T>,
    val_set: &Dataset<T>,
    cfg: &TrainConfig,
) -> Result<(Network<T>, ExperimentLog)> {
    run(net, train_set, val_set, cfg, "retrain", true)
}
