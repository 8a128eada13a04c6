use super::mask::{Granularity, PruningMask};
use crate::error::{Error, Result};
use crate::layers::ConvLayer;
use crate::network::{ConvBlock, Layer, Network};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn expect(mask: &PruningMask, g: Granularity) -> Result<()> {
    if mask.granularity != g {
        return Err(Error::Mask(format!("expected a {g} mask, got a {} mask", mask.granularity)));
    }
    Ok(())
}

fn thin_conv<T: Scalar>(conv: &ConvLayer<T>, rows: &[usize], cols: &[usize]) -> Result<ConvLayer<T>> {
    let k = conv.kernel_size();
    let mut data = Vec::with_capacity(rows.len() * cols.len() * k * k);
    for &o in rows {
        for &i in cols {
            data.extend_from_slice(conv.kernel(o, i));
        }
    }
    ConvLayer::from_parts(
        Tensor::new(vec![rows.len(), cols.len(), k, k], data)?,
        rows.iter().map(|&o| conv.biases()[o]).collect(),
        conv.connectivity().select(rows, cols),
        conv.stride(),
        conv.pad(),
    )
}

/// Removes the pruned maps physically: their kernel rows, biases and batch
/// norm channels, the matching input columns of the next conv layer, or the
/// matching inputs of the first fully connected layer.
pub fn apply_feature_map_mask<T: Scalar>(net: &Network<T>, mask: &PruningMask) -> Result<Network<T>> {
    expect(mask, Granularity::FeatureMap)?;
    mask.validate(net)?;
    if mask.is_empty() {
        return Ok(net.clone());
    }
    let convs = net.conv_count();
    let mut keep: Vec<Vec<usize>> = Vec::with_capacity(convs);
    for c in 1..=convs {
        let maps = net.conv(c)?.conv().out_maps();
        let dead = mask.layer(c).map(|l| l.maps.as_slice()).unwrap_or(&[]);
        let kept: Vec<usize> = (0..maps).filter(|m| !dead.contains(m)).collect();
        if kept.is_empty() {
            return Err(Error::Mask(format!("mask prunes every map of Conv{c}")));
        }
        keep.push(kept);
    }

    let shapes = net.spec().shapes();
    let mut spec = net.spec().clone();
    let mut layers = Vec::with_capacity(net.layers().len());
    let mut ci = 0;
    let mut fc_fixed = false;
    for (pos, layer) in net.layers().iter().enumerate() {
        let built = match layer {
            Layer::Conv(b) => {
                let rows = &keep[ci];
                let cols: Vec<usize> = if ci == 0 {
                    (0..b.conv().in_maps()).collect()
                } else {
                    keep[ci - 1].clone()
                };
                if rows.len() != b.conv().out_maps() {
                    spec = spec.with_conv_width(ci, rows.len())?;
                }
                ci += 1;
                Layer::Conv(ConvBlock {
                    conv: thin_conv(b.conv(), rows, &cols)?,
                    bn: b.bn().select(rows),
                })
            }
            Layer::Dense(d) | Layer::Classifier(d) if !fc_fixed => {
                fc_fixed = true;
                let last = &keep[convs - 1];
                let [maps, h, w] = shapes[pos - 1];
                let d = if last.len() == maps {
                    d.clone()
                } else {
                    let plane = h * w;
                    let feats: Vec<usize> = last.iter().flat_map(|&m| m * plane..(m + 1) * plane).collect();
                    d.select_inputs(&feats)
                };
                match layer {
                    Layer::Dense(_) => Layer::Dense(d),
                    _ => Layer::Classifier(d),
                }
            }
            other => other.clone(),
        };
        layers.push(built);
    }
    let mut out = net.clone();
    out.replace(spec, layers)?;
    Ok(out)
}

/// Clears the connectivity flags of the pruned connections and zeroes
/// their kernels; the network keeps its shape.
pub fn apply_kernel_mask<T: Scalar>(net: &Network<T>, mask: &PruningMask) -> Result<Network<T>> {
    expect(mask, Granularity::Kernel)?;
    mask.validate(net)?;
    let mut out = net.clone();
    for l in &mask.layers {
        let conv = out.conv_mut(l.conv)?.conv_mut();
        for &(i, o) in &l.kernels {
            conv.prune_connection(o, i);
        }
    }
    Ok(out)
}

/// Applies a mask of either granularity.
pub fn apply_mask<T: Scalar>(net: &Network<T>, mask: &PruningMask) -> Result<Network<T>> {
    match mask.granularity {
        Granularity::FeatureMap => apply_feature_map_mask(net, mask),
        Granularity::Kernel => apply_kernel_mask(net, mask),
    }
}
