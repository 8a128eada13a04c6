//! Instantiated networks: initialization, inference (optionally through a
//! temporary pruning overlay), training-mode forward/backward, and
//! parameter/MAC accounting.

mod checkpoint;
mod overlay;

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{LayerSpec, NetworkSpec};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layers::{
    argmax, batchnorm_backward, batchnorm_forward, batchnorm_infer, conv_backward_with, conv_forward_with,
    dense_backward, dense_forward, maxpool_backward, maxpool_forward, relu, relu_backward, BatchNorm,
    BatchNormCache, ConvLayer, DenseLayer, MacCounter, Mode, PoolIndices,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use checkpoint::{load, load_any, save, AnyNetwork, FORMAT_VERSION};
pub use overlay::{Overlay, PreparedOverlay};

/// Inclusive range of conv layers, numbered from 1 (`Conv1` is the first).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvRange {
    pub first: usize,
    pub last: usize,
}

impl ConvRange {
    pub fn new(first: usize, last: usize) -> Result<Self> {
        if first == 0 || first > last {
            return Err(Error::InvalidArgument(format!(
                "empty conv range Conv{first}..Conv{last}"
            )));
        }
        Ok(ConvRange { first, last })
    }

    pub fn single(conv: usize) -> Result<Self> {
        Self::new(conv, conv)
    }

    /// Every conv layer of the network.
    pub fn all<T: Scalar>(net: &Network<T>) -> Self {
        ConvRange {
            first: 1,
            last: net.conv_count(),
        }
    }

    /// Every conv layer except the first, which is conventionally left dense.
    pub fn default_for<T: Scalar>(net: &Network<T>) -> Result<Self> {
        Self::new(2, net.conv_count())
    }

    pub fn iter(&self) -> std::ops::RangeInclusive<usize> {
        self.first..=self.last
    }

    pub fn len(&self) -> usize {
        self.last + 1 - self.first
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, conv: usize) -> bool {
        (self.first..=self.last).contains(&conv)
    }

    pub fn check<T: Scalar>(&self, net: &Network<T>) -> Result<()> {
        if self.first == 0 || self.first > self.last || self.last > net.conv_count() {
            return Err(Error::InvalidArgument(format!(
                "conv range Conv{}..Conv{} outside a network with {} conv layers",
                self.first,
                self.last,
                net.conv_count()
            )));
        }
        Ok(())
    }
}

impl std::fmt::Display for ConvRange {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Conv{}..Conv{}", self.first, self.last)
    }
}

impl std::str::FromStr for ConvRange {
    type Err = String;

    /// Accepts `2..6`, `2-6`, `2:6` or a single number.
    fn from_str(s: &str) -> Result<Self, String> {
        let s = s.trim();
        let parts: Vec<&str> = s.split(['-', ':']).flat_map(|p| p.split("..")).filter(|p| !p.is_empty()).collect();
        let nums: Vec<usize> = parts
            .iter()
            .map(|p| p.trim_start_matches("Conv").trim_start_matches("conv").parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|e| format!("bad conv range {s:?}: {e}"))?;
        match nums.as_slice() {
            [one] => ConvRange::single(*one).map_err(|e| e.to_string()),
            [a, b] => ConvRange::new(*a, *b).map_err(|e| e.to_string()),
            _ => Err(format!("bad conv range {s:?}")),
        }
    }
}

/// Conv layer with its batch norm; ReLU follows.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock<T> {
    pub(crate) conv: ConvLayer<T>,
    pub(crate) bn: BatchNorm<T>,
}

impl<T: Scalar> ConvBlock<T> {
    pub fn conv(&self) -> &ConvLayer<T> {
        &self.conv
    }
    pub fn conv_mut(&mut self) -> &mut ConvLayer<T> {
        &mut self.conv
    }
    pub fn bn(&self) -> &BatchNorm<T> {
        &self.bn
    }
    pub fn bn_mut(&mut self) -> &mut BatchNorm<T> {
        &mut self.bn
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T> {
    Conv(ConvBlock<T>),
    Pool { window: usize, stride: usize },
    /// Fully connected layer followed by ReLU.
    Dense(DenseLayer<T>),
    /// Final affine map producing logits.
    Classifier(DenseLayer<T>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct NetMeta {
    pub init_seed: u64,
    pub epochs_trained: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    spec: NetworkSpec,
    layers: Vec<Layer<T>>,
    meta: NetMeta,
}

/// Per-sample evaluation summary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub n: usize,
    pub errors: usize,
    pub mcr: f64,
}

impl Evaluation {
    pub fn from_counts(n: usize, errors: usize) -> Self {
        Evaluation {
            n,
            errors,
            mcr: if n == 0 { 0.0 } else { 100.0 * errors as f64 / n as f64 },
        }
    }
}

const EVAL_CHUNK: usize = 250;

impl<T: Scalar> Network<T> {
    /// He-initialized network, deterministic per `(spec, seed)`.
    pub fn initialize(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = spec.shapes();
        let mut layers = Vec::with_capacity(spec.layers().len());
        let mut prev = spec.input_shape();
        for (li, layer) in spec.layers().iter().enumerate() {
            let built = match *layer {
                LayerSpec::Conv { maps, k } => {
                    let pad = spec.padding().amount(k);
                    Layer::Conv(ConvBlock {
                        conv: ConvLayer::he_init(prev[0], maps, k, 1, pad, &mut rng)?,
                        bn: BatchNorm::new(maps),
                    })
                }
                LayerSpec::MaxPool { window, stride } => Layer::Pool { window, stride },
                LayerSpec::Fc { units } => Layer::Dense(DenseLayer::he_init(prev.iter().product(), units, &mut rng)),
                LayerSpec::Softmax { classes } => {
                    Layer::Classifier(DenseLayer::he_init(prev.iter().product(), classes, &mut rng))
                }
            };
            layers.push(built);
            prev = shapes[li];
        }
        Ok(Network {
            spec: spec.clone(),
            layers,
            meta: NetMeta {
                init_seed: seed,
                epochs_trained: 0,
            },
        })
    }

    pub(crate) fn from_parts(spec: NetworkSpec, layers: Vec<Layer<T>>, meta: NetMeta) -> Result<Self> {
        let net = Network { spec, layers, meta };
        net.check_structure()?;
        Ok(net)
    }

    /// Verifies that parameter shapes chain and match the spec.
    pub fn check_structure(&self) -> Result<()> {
        if self.layers.len() != self.spec.layers().len() {
            return Err(Error::Shape("layer stack does not match spec".into()));
        }
        let shapes = self.spec.shapes();
        let mut prev = self.spec.input_shape();
        for (li, (layer, ls)) in self.layers.iter().zip(self.spec.layers()).enumerate() {
            let ok = match (layer, ls) {
                (Layer::Conv(b), LayerSpec::Conv { maps, k }) => {
                    b.conv.in_maps() == prev[0]
                        && b.conv.out_maps() == *maps
                        && b.conv.kernel_size() == *k
                        && b.bn.maps() == *maps
                        && b.conv.check_invariants().is_ok()
                }
                (Layer::Pool { window, stride }, LayerSpec::MaxPool { window: w2, stride: s2 }) => {
                    window == w2 && stride == s2
                }
                (Layer::Dense(d), LayerSpec::Fc { units }) => {
                    d.inputs() == prev.iter().product::<usize>() && d.outputs() == *units
                }
                (Layer::Classifier(d), LayerSpec::Softmax { classes }) => {
                    d.inputs() == prev.iter().product::<usize>() && d.outputs() == *classes
                }
                _ => false,
            };
            if !ok {
                return Err(Error::Shape(format!("layer {li} does not match its descriptor {ls:?}")));
            }
            prev = shapes[li];
        }
        Ok(())
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }
    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }
    pub(crate) fn replace(&mut self, spec: NetworkSpec, layers: Vec<Layer<T>>) -> Result<()> {
        self.spec = spec;
        self.layers = layers;
        self.check_structure()
    }
    pub fn meta(&self) -> &NetMeta {
        &self.meta
    }
    pub fn meta_mut(&mut self) -> &mut NetMeta {
        &mut self.meta
    }

    pub fn conv_count(&self) -> usize {
        self.spec.conv_count()
    }

    /// Stack positions of the conv layers.
    pub fn conv_positions(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| matches!(l, Layer::Conv(_)).then_some(i))
            .collect()
    }

    /// Stack position of conv layer `conv` (1-based).
    pub fn conv_position(&self, conv: usize) -> Result<usize> {
        conv.checked_sub(1)
            .and_then(|c| self.conv_positions().get(c).copied())
            .ok_or_else(|| Error::InvalidArgument(format!("network has no Conv{conv}")))
    }

    /// Conv block `conv` (1-based).
    pub fn conv(&self, conv: usize) -> Result<&ConvBlock<T>> {
        let pos = self.conv_position(conv)?;
        match &self.layers[pos] {
            Layer::Conv(b) => Ok(b),
            _ => unreachable!(),
        }
    }

    pub fn conv_mut(&mut self, conv: usize) -> Result<&mut ConvBlock<T>> {
        let pos = self.conv_position(conv)?;
        match &mut self.layers[pos] {
            Layer::Conv(b) => Ok(b),
            _ => unreachable!(),
        }
    }

    /// Output extent `(H', W')` of conv layer `conv`.
    pub fn conv_output_hw(&self, conv: usize) -> Result<(usize, usize)> {
        let pos = self.conv_position(conv)?;
        let s = self.spec.shapes()[pos];
        Ok((s[1], s[2]))
    }

    /// Active conv kernel weights over `range`; biases and batch-norm
    /// scale/shift are added when `include_bias` is set.
    pub fn count_weights(&self, range: ConvRange, include_bias: bool) -> Result<u64> {
        range.check(self)?;
        let mut total = 0u64;
        for c in range.iter() {
            let conv = &self.conv(c)?.conv;
            let k = conv.kernel_size() as u64;
            total += conv.active_connections() as u64 * k * k;
            if include_bias {
                total += 3 * conv.out_maps() as u64;
            }
        }
        Ok(total)
    }

    /// Per-sample conv MACs over `range`: active connections times `H'W'k^2`.
    pub fn count_macs(&self, range: ConvRange) -> Result<u64> {
        range.check(self)?;
        let mut total = 0u64;
        for c in range.iter() {
            total += self.conv_macs(c)?;
        }
        Ok(total)
    }

    pub fn conv_macs(&self, conv: usize) -> Result<u64> {
        let layer = &self.conv(conv)?.conv;
        let (h, w) = self.conv_output_hw(conv)?;
        let k = layer.kernel_size();
        Ok(layer.active_connections() as u64 * (h * w * k * k) as u64)
    }

    /// Inference-mode logits `[n, classes]` for a `[n, maps, H, W]` batch.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward_with(x, None, None)
    }

    pub fn forward_with(
        &self,
        x: &Tensor<T>,
        overlay: Option<&PreparedOverlay<T>>,
        counter: Option<&MacCounter>,
    ) -> Result<Tensor<T>> {
        self.forward_segment(x, 0..self.layers.len(), overlay, counter)
    }

    /// Runs stack positions `span` in inference mode. The input must be the
    /// activation entering `span.start`.
    pub fn forward_segment(
        &self,
        x: &Tensor<T>,
        span: Range<usize>,
        overlay: Option<&PreparedOverlay<T>>,
        counter: Option<&MacCounter>,
    ) -> Result<Tensor<T>> {
        if let Some(ov) = overlay {
            ov.check_fits(self)?;
        }
        let mut act = x.clone();
        if span.start == 0 {
            let [c, h, w] = self.spec.input_shape();
            if act.rank() != 4 || act.shape()[1..] != [c, h, w] {
                return Err(Error::Shape(format!(
                    "network expects [n,{c},{h},{w}], got {:?}",
                    act.shape()
                )));
            }
        }
        for li in span {
            act = match &self.layers[li] {
                Layer::Conv(block) => {
                    let conn = overlay
                        .and_then(|o| o.connectivity(li))
                        .unwrap_or(&block.conv.connectivity);
                    let y = conv_forward_with(&act, &block.conv, conn, counter)?;
                    let mut y = batchnorm_infer(&y, &block.bn)?;
                    relu(&mut y);
                    if let Some(dead) = overlay.and_then(|o| o.dead_maps(li)) {
                        zero_maps(&mut y, dead);
                    }
                    y
                }
                Layer::Pool { window, stride } => maxpool_forward(&act, *window, *stride)?.0,
                Layer::Dense(d) | Layer::Classifier(d) => {
                    let flat = flatten(act)?;
                    let mut y = match overlay.and_then(|o| o.compacted_dense(li)) {
                        Some((layer, keep)) => dense_forward(&gather_features(&flat, keep), layer)?,
                        None => dense_forward(&flat, d)?,
                    };
                    if matches!(self.layers[li], Layer::Dense(_)) {
                        relu(&mut y);
                    }
                    y
                }
            };
        }
        Ok(act)
    }
}

fn zero_maps<T: Scalar>(y: &mut Tensor<T>, dead: &[bool]) {
    let n = y.outer();
    let c = dead.len();
    let plane = y.inner_len() / c;
    for s in 0..n {
        let sample = y.outer_slice_mut(s);
        for (m, _) in dead.iter().enumerate().filter(|(_, d)| **d) {
            sample[m * plane..(m + 1) * plane].fill(T::zero());
        }
    }
}

fn flatten<T: Scalar>(act: Tensor<T>) -> Result<Tensor<T>> {
    let n = act.outer();
    let features = act.inner_len();
    act.reshape(vec![n, features])
}

fn gather_features<T: Scalar>(x: &Tensor<T>, keep: &[usize]) -> Tensor<T> {
    let n = x.outer();
    let mut data = Vec::with_capacity(n * keep.len());
    for s in 0..n {
        let row = x.outer_slice(s);
        data.extend(keep.iter().map(|&j| row[j]));
    }
    Tensor::new(vec![n, keep.len()], data).expect("consistent gather")
}

/// Saved activations of a training-mode forward pass.
#[derive(Debug)]
pub struct Tape<T> {
    entries: Vec<TapeEntry<T>>,
}

#[derive(Debug)]
enum TapeEntry<T> {
    Conv {
        input: Tensor<T>,
        bn: BatchNormCache<T>,
        act: Tensor<T>,
    },
    Pool(PoolIndices),
    Dense {
        input_shape: Vec<usize>,
        input: Tensor<T>,
        act: Option<Tensor<T>>,
    },
}

/// Parameter gradients, mirroring the layer stack.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerGrad<T> {
    Conv {
        kernels: Tensor<T>,
        biases: Vec<T>,
        gamma: Vec<T>,
        beta: Vec<T>,
    },
    Pool,
    Dense {
        weights: Tensor<T>,
        biases: Vec<T>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub layers: Vec<LayerGrad<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient slices in the order of [`Network::visit_params_mut`].
    pub fn slices(&self) -> Vec<&[T]> {
        let mut out = Vec::new();
        for g in &self.layers {
            match g {
                LayerGrad::Conv {
                    kernels,
                    biases,
                    gamma,
                    beta,
                } => {
                    out.push(kernels.data());
                    out.push(biases.as_slice());
                    out.push(gamma.as_slice());
                    out.push(beta.as_slice());
                }
                LayerGrad::Pool => {}
                LayerGrad::Dense { weights, biases } => {
                    out.push(weights.data());
                    out.push(biases.as_slice());
                }
            }
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

impl<T: Scalar> Network<T> {
    /// Training-mode forward pass: batch statistics, running-stat updates,
    /// and a tape for [`Network::backward`].
    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, Tape<T>)> {
        let mut act = x.clone();
        let mut entries = Vec::with_capacity(self.layers.len());
        for layer in self.layers.iter_mut() {
            act = match layer {
                Layer::Conv(block) => {
                    let y = conv_forward_with(&act, &block.conv, &block.conv.connectivity, None)?;
                    let (mut y, cache) = batchnorm_forward(&y, &mut block.bn, Mode::Train)?;
                    relu(&mut y);
                    entries.push(TapeEntry::Conv {
                        input: act,
                        bn: cache.expect("train mode caches"),
                        act: y.clone(),
                    });
                    y
                }
                Layer::Pool { window, stride } => {
                    let (y, idx) = maxpool_forward(&act, *window, *stride)?;
                    entries.push(TapeEntry::Pool(idx));
                    y
                }
                Layer::Dense(d) => {
                    let input_shape = act.shape().to_vec();
                    let flat = flatten(act)?;
                    let mut y = dense_forward(&flat, d)?;
                    relu(&mut y);
                    entries.push(TapeEntry::Dense {
                        input_shape,
                        input: flat,
                        act: Some(y.clone()),
                    });
                    y
                }
                Layer::Classifier(d) => {
                    let input_shape = act.shape().to_vec();
                    let flat = flatten(act)?;
                    let y = dense_forward(&flat, d)?;
                    entries.push(TapeEntry::Dense {
                        input_shape,
                        input: flat,
                        act: None,
                    });
                    y
                }
            };
        }
        act.ensure_finite("logits")?;
        Ok((act, Tape { entries }))
    }

    pub fn backward(&self, tape: &Tape<T>, grad_logits: Tensor<T>) -> Result<Gradients<T>> {
        let mut grad = grad_logits;
        let mut out: Vec<LayerGrad<T>> = Vec::with_capacity(self.layers.len());
        for (li, (layer, entry)) in self.layers.iter().zip(&tape.entries).enumerate().rev() {
            let want_input = li > 0;
            match (layer, entry) {
                (Layer::Conv(block), TapeEntry::Conv { input, bn, act }) => {
                    relu_backward(act, &mut grad);
                    let (g_bn, g_gamma, g_beta) = batchnorm_backward(bn, &grad)?;
                    let g = conv_backward_with(input, &block.conv, &block.conv.connectivity, &g_bn, want_input)?;
                    out.push(LayerGrad::Conv {
                        kernels: g.kernels,
                        biases: g.biases,
                        gamma: g_gamma,
                        beta: g_beta,
                    });
                    if let Some(gi) = g.input {
                        grad = gi;
                    }
                }
                (Layer::Pool { .. }, TapeEntry::Pool(idx)) => {
                    grad = maxpool_backward(idx, &grad)?;
                    out.push(LayerGrad::Pool);
                }
                (Layer::Dense(d) | Layer::Classifier(d), TapeEntry::Dense { input_shape, input, act }) => {
                    if let Some(act) = act {
                        relu_backward(act, &mut grad);
                    }
                    let (gx, gw, gb) = dense_backward(input, d, &grad)?;
                    out.push(LayerGrad::Dense { weights: gw, biases: gb });
                    grad = gx.reshape(input_shape.clone())?;
                }
                _ => return Err(Error::Shape("tape does not match network".into())),
            }
        }
        out.reverse();
        Ok(Gradients { layers: out })
    }

    /// Visits every trainable parameter slice in a fixed order.
    pub fn visit_params_mut(&mut self, mut f: impl FnMut(&mut [T])) {
        for layer in &mut self.layers {
            match layer {
                Layer::Conv(b) => {
                    f(b.conv.kernels.data_mut());
                    f(&mut b.conv.biases);
                    f(&mut b.bn.gamma);
                    f(&mut b.bn.beta);
                }
                Layer::Pool { .. } => {}
                Layer::Dense(d) | Layer::Classifier(d) => {
                    f(d.weights.data_mut());
                    f(&mut d.biases);
                }
            }
        }
    }

    pub fn param_lengths(&mut self) -> Vec<usize> {
        let mut v = Vec::new();
        self.visit_params_mut(|p| v.push(p.len()));
        v
    }

    /// Predicted labels (argmax, lowest index on ties) for a batch.
    pub fn predict(&self, batch: &Tensor<T>) -> Result<Vec<usize>> {
        self.predict_with(batch, None)
    }

    pub fn predict_with(&self, batch: &Tensor<T>, overlay: Option<&PreparedOverlay<T>>) -> Result<Vec<usize>> {
        let logits = self.forward_with(batch, overlay, None)?;
        Ok((0..logits.outer()).map(|s| argmax(logits.outer_slice(s))).collect())
    }

    pub fn evaluate(&self, data: &Dataset<T>) -> Result<Evaluation> {
        self.evaluate_with(data, None)
    }

    pub fn evaluate_with(&self, data: &Dataset<T>, overlay: Option<&PreparedOverlay<T>>) -> Result<Evaluation> {
        if data.is_empty() {
            return Err(Error::EmptyDataset("evaluation set".into()));
        }
        let mut errors = 0;
        let all: Vec<usize> = (0..data.len()).collect();
        for chunk in all.chunks(EVAL_CHUNK) {
            let (batch, labels) = data.gather(chunk);
            let pred = self.predict_with(&batch, overlay)?;
            errors += pred.iter().zip(&labels).filter(|(p, l)| p != l).count();
        }
        Ok(Evaluation::from_counts(data.len(), errors))
    }

    /// Misclassification rate in percent.
    pub fn evaluate_mcr(&self, data: &Dataset<T>) -> Result<f64> {
        Ok(self.evaluate(data)?.mcr)
    }
}
