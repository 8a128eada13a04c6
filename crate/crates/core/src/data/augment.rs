//! Train-time crop/flip augmentation and ten-crop evaluation.

use rand::Rng;

use super::Dataset;
use crate::error::{Error, Result};
use crate::layers::{argmax, softmax};
use crate::network::{Evaluation, Network};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Copies the `crop x crop` window at `(top, left)` of every map of one
/// sample, optionally mirrored left-right.
pub fn crop_view<T: Scalar>(sample: &[T], shape: [usize; 3], top: usize, left: usize, crop: usize, flip: bool) -> Vec<T> {
    let [c, h, w] = shape;
    debug_assert!(top + crop <= h && left + crop <= w);
    let mut out = Vec::with_capacity(c * crop * crop);
    for m in 0..c {
        for y in 0..crop {
            let row = &sample[m * h * w + (top + y) * w + left..][..crop];
            if flip {
                out.extend(row.iter().rev());
            } else {
                out.extend_from_slice(row);
            }
        }
    }
    out
}

fn check_crop(shape: [usize; 3], crop: usize) -> Result<()> {
    if crop == 0 || crop > shape[1] || crop > shape[2] {
        return Err(Error::InvalidArgument(format!(
            "crop {crop} does not fit {}x{} samples",
            shape[1], shape[2]
        )));
    }
    Ok(())
}

/// Random `crop x crop` window per sample, mirrored with probability 1/2
/// when `flip` is set.
pub fn augment_crop_flip<T: Scalar, R: Rng>(batch: &Tensor<T>, crop: usize, flip: bool, rng: &mut R) -> Result<Tensor<T>> {
    let &[n, c, h, w] = batch.shape() else {
        return Err(Error::Shape(format!("expected [n,c,h,w], got {:?}", batch.shape())));
    };
    check_crop([c, h, w], crop)?;
    let mut data = Vec::with_capacity(n * c * crop * crop);
    for s in 0..n {
        let top = rng.gen_range(0..=h - crop);
        let left = rng.gen_range(0..=w - crop);
        let mirror = flip && rng.gen_bool(0.5);
        data.extend(crop_view(batch.outer_slice(s), [c, h, w], top, left, crop, mirror));
    }
    Tensor::new(vec![n, c, crop, crop], data)
}

/// Top-left corners of the four corner crops and the center crop.
pub fn five_crop_origins(h: usize, w: usize, crop: usize) -> [(usize, usize); 5] {
    let (dy, dx) = (h - crop, w - crop);
    [(0, 0), (0, dx), (dy, 0), (dy, dx), (dy / 2, dx / 2)]
}

/// The ten evaluation views of one sample as a `[10, c, crop, crop]` batch:
/// each of the five crops, then its mirror.
pub fn ten_crop_views<T: Scalar>(sample: &[T], shape: [usize; 3], crop: usize) -> Result<Tensor<T>> {
    check_crop(shape, crop)?;
    let mut data = Vec::with_capacity(10 * shape[0] * crop * crop);
    for (top, left) in five_crop_origins(shape[1], shape[2], crop) {
        for flip in [false, true] {
            data.extend(crop_view(sample, shape, top, left, crop, flip));
        }
    }
    Tensor::new(vec![10, shape[0], crop, crop], data)
}

/// Mean softmax probabilities over the ten views.
pub fn ten_crop_probs<T: Scalar>(net: &Network<T>, sample: &[T], shape: [usize; 3], crop: usize) -> Result<Vec<f64>> {
    let logits = net.forward(&ten_crop_views(sample, shape, crop)?)?;
    let classes = logits.inner_len();
    let mut mean = vec![0.0; classes];
    for v in 0..10 {
        for (m, p) in mean.iter_mut().zip(softmax(logits.outer_slice(v))) {
            *m += p.as_f64();
        }
    }
    mean.iter_mut().for_each(|m| *m /= 10.0);
    Ok(mean)
}

pub fn ten_crop_predict<T: Scalar>(net: &Network<T>, sample: &[T], shape: [usize; 3], crop: usize) -> Result<usize> {
    Ok(argmax(&ten_crop_probs(net, sample, shape, crop)?))
}

pub fn ten_crop_evaluate<T: Scalar>(net: &Network<T>, data: &Dataset<T>, crop: usize) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("ten-crop evaluation".into()));
    }
    let shape = data.sample_shape();
    let mut errors = 0;
    for s in 0..data.len() {
        if ten_crop_predict(net, data.sample(s), shape, crop)? != data.labels()[s] {
            errors += 1;
        }
    }
    Ok(Evaluation::from_counts(data.len(), errors))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{NetworkSpec, Padding};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn full_crop_without_flip_is_identity() {
        let x = Tensor::from_fn(vec![3, 2, 5, 5], |i| i as f64);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment_crop_flip(&x, 5, false, &mut rng).unwrap(), x);
        assert!(augment_crop_flip(&x, 6, false, &mut rng).is_err());
    }

    #[test]
    fn augmentation_keeps_values_from_a_window() {
        let x = Tensor::from_fn(vec![4, 1, 6, 6], |i| i as f64);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let y = augment_crop_flip(&x, 4, true, &mut rng).unwrap();
        assert_eq!(y.shape(), &[4, 1, 4, 4]);
        for s in 0..4 {
            let src = x.outer_slice(s);
            assert!(y.outer_slice(s).iter().all(|v| src.contains(v)));
        }
    }

    #[test]
    fn mirror_symmetric_input_gives_same_views() {
        let spec = NetworkSpec::parse_with_padding("3C3-4", [1, 4, 4], Padding::Same).unwrap();
        let net = Network::<f64>::initialize(&spec, 4).unwrap();
        let sample: Vec<f64> = (0..36).map(|i| ((i / 6) as f64) * 0.3 + ((i % 6) as f64 - 2.5).abs()).collect();
        let views = ten_crop_views(&sample, [1, 6, 6], 4).unwrap();
        let logits = net.forward(&views).unwrap();
        // corner pairs mirror onto each other, so compare probability sums
        let p10 = ten_crop_probs(&net, &sample, [1, 6, 6], 4).unwrap();
        let mut five = vec![0.0; 4];
        for v in (0..10).step_by(2) {
            for (f, p) in five.iter_mut().zip(softmax(logits.outer_slice(v))) {
                *f += p / 5.0;
            }
        }
        for (a, b) in p10.iter().zip(&five) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
