//! Network checkpoints in the shared binary container.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ConvBlock, Layer, NetMeta, Network};
use crate::arch::{NetworkSpec, Padding};
use crate::container::{write_atomic, Reader, Writer};
use crate::error::{Error, Result};
use crate::layers::{BatchNorm, Connectivity, ConvLayer, DenseLayer};
use crate::scalar::{Precision, Scalar};
use crate::tensor::Tensor;

pub use crate::container::FORMAT_VERSION;

const KIND: &str = "network";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ConvHeader {
    stride: usize,
    pad: usize,
    bn_momentum: f64,
    bn_epsilon: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    precision: Precision,
    architecture: String,
    input_shape: [usize; 3],
    padding: Padding,
    meta: NetMeta,
    convs: Vec<ConvHeader>,
}

/// A checkpoint loaded without knowing its precision in advance.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyNetwork {
    F32(Network<f32>),
    F64(Network<f64>),
}

impl AnyNetwork {
    pub fn precision(&self) -> Precision {
        match self {
            AnyNetwork::F32(_) => Precision::F32,
            AnyNetwork::F64(_) => Precision::F64,
        }
    }
}

impl<T: Scalar> Network<T> {
    /// Serialized checkpoint bytes; identical networks give identical bytes.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new();
        let mut convs = Vec::new();
        for (li, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Conv(b) => {
                    let c = &b.conv;
                    w.values(&format!("{li}.kernels"), c.kernels.data());
                    w.values(&format!("{li}.biases"), &c.biases);
                    w.bits(&format!("{li}.connectivity"), c.connectivity.flag_bits(), &c.connectivity.to_bytes());
                    w.values(&format!("{li}.gamma"), &b.bn.gamma);
                    w.values(&format!("{li}.beta"), &b.bn.beta);
                    w.values(&format!("{li}.running_mean"), &b.bn.running_mean);
                    w.values(&format!("{li}.running_var"), &b.bn.running_var);
                    convs.push(ConvHeader {
                        stride: c.stride,
                        pad: c.pad,
                        bn_momentum: b.bn.momentum,
                        bn_epsilon: b.bn.epsilon,
                    });
                }
                Layer::Pool { .. } => {}
                Layer::Dense(d) | Layer::Classifier(d) => {
                    w.values(&format!("{li}.weights"), d.weights.data());
                    w.values(&format!("{li}.biases"), &d.biases);
                }
            }
        }
        let header = CheckpointHeader {
            precision: T::PRECISION,
            architecture: self.spec.render(),
            input_shape: self.spec.input_shape(),
            padding: self.spec.padding(),
            meta: self.meta.clone(),
            convs,
        };
        w.finish(KIND, serde_json::to_value(header)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        from_reader(&Reader::from_bytes(bytes, "<memory>")?)
    }
}

fn header_of(r: &Reader) -> Result<CheckpointHeader> {
    if r.kind() != KIND {
        return Err(Error::format(r.origin(), format!("container holds a {}, not a network", r.kind())));
    }
    Ok(serde_json::from_value(r.meta().clone())?)
}

fn from_reader<T: Scalar>(r: &Reader) -> Result<Network<T>> {
    let h = header_of(r)?;
    if h.precision != T::PRECISION {
        return Err(Error::Precision {
            found: h.precision.to_string(),
            requested: T::PRECISION.to_string(),
        });
    }
    let spec = NetworkSpec::parse_with_padding(&h.architecture, h.input_shape, h.padding)?;
    let shapes = spec.shapes();
    let mut prev = spec.input_shape();
    let mut convs = h.convs.iter();
    let mut layers = Vec::with_capacity(spec.layers().len());
    for (li, ls) in spec.layers().iter().enumerate() {
        let layer = match *ls {
            crate::arch::LayerSpec::Conv { maps, k } => {
                let ch = convs
                    .next()
                    .ok_or_else(|| Error::format(r.origin(), "header lists too few conv layers"))?;
                let kernels = Tensor::new(
                    vec![maps, prev[0], k, k],
                    r.values(&format!("{li}.kernels"), maps * prev[0] * k * k)?,
                )?;
                let (bits, packed) = r.bits(&format!("{li}.connectivity"))?;
                if bits != maps * prev[0] {
                    return Err(Error::format(r.origin(), format!("layer {li} connectivity size mismatch")));
                }
                let connectivity = Connectivity::from_bytes(maps, prev[0], packed)?;
                let conv = ConvLayer::from_parts(kernels, r.values(&format!("{li}.biases"), maps)?, connectivity, ch.stride, ch.pad)?;
                let bn = BatchNorm {
                    gamma: r.values(&format!("{li}.gamma"), maps)?,
                    beta: r.values(&format!("{li}.beta"), maps)?,
                    running_mean: r.values(&format!("{li}.running_mean"), maps)?,
                    running_var: r.values(&format!("{li}.running_var"), maps)?,
                    momentum: ch.bn_momentum,
                    epsilon: ch.bn_epsilon,
                };
                Layer::Conv(ConvBlock { conv, bn })
            }
            crate::arch::LayerSpec::MaxPool { window, stride } => Layer::Pool { window, stride },
            crate::arch::LayerSpec::Fc { units } | crate::arch::LayerSpec::Softmax { classes: units } => {
                let inputs: usize = prev.iter().product();
                let d = DenseLayer::new(
                    Tensor::new(vec![units, inputs], r.values(&format!("{li}.weights"), units * inputs)?)?,
                    r.values(&format!("{li}.biases"), units)?,
                )?;
                if matches!(ls, crate::arch::LayerSpec::Fc { .. }) {
                    Layer::Dense(d)
                } else {
                    Layer::Classifier(d)
                }
            }
        };
        layers.push(layer);
        prev = shapes[li];
    }
    Network::from_parts(spec, layers, h.meta)
}

pub fn save<T: Scalar>(net: &Network<T>, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &net.to_bytes()?)
}

/// Loads a checkpoint of the requested precision; a precision mismatch is an
/// error rather than a silent conversion.
pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<Network<T>> {
    from_reader(&Reader::read(path.as_ref())?)
}

pub fn load_any(path: impl AsRef<Path>) -> Result<AnyNetwork> {
    let r = Reader::read(path.as_ref())?;
    Ok(match header_of(&r)?.precision {
        Precision::F32 => AnyNetwork::F32(from_reader(&r)?),
        Precision::F64 => AnyNetwork::F64(from_reader(&r)?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::Padding;

    fn net() -> Network<f64> {
        let spec = NetworkSpec::parse_with_padding("4C3-MP2-2x5C3-7FC-3", [2, 10, 10], Padding::Same).unwrap();
        let mut net = Network::initialize(&spec, 9).unwrap();
        net.conv_mut(2).unwrap().conv_mut().prune_connection(1, 2);
        net.conv_mut(2).unwrap().bn_mut().running_var_mut()[0] = 0.25;
        net.meta_mut().epochs_trained = 4;
        net
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let a = net();
        let bytes = a.to_bytes().unwrap();
        let b = Network::<f64>::from_bytes(&bytes).unwrap();
        assert_eq!(a, b);
        assert_eq!(b.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn precision_is_checked() {
        let bytes = net().to_bytes().unwrap();
        assert!(matches!(Network::<f32>::from_bytes(&bytes), Err(Error::Precision { .. })));
    }

    #[test]
    fn file_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        save(&net(), &path).unwrap();
        assert!(matches!(load_any(&path).unwrap(), AnyNetwork::F64(n) if n == net()));
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load::<f64>(&path), Err(Error::Checksum { .. })));
    }
}
