use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{batch_dims, restore_rank, Tensor};

/// Flat source index (into the input tensor) of every pooled output value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolIndices {
    input_shape: Vec<usize>,
    indices: Vec<usize>,
}

impl PoolIndices {
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }
}

pub fn pool_output_size(h: usize, w: usize, window: usize, stride: usize) -> Result<(usize, usize)> {
    if window == 0 || stride == 0 {
        return Err(Error::InvalidArgument("pool window and stride must be positive".into()));
    }
    if h < window || w < window {
        return Err(Error::Shape(format!("pool window {window} larger than input {h}x{w}")));
    }
    Ok(((h - window) / stride + 1, (w - window) / stride + 1))
}

/// Max pooling without padding. Ties resolve to the lowest flat index.
pub fn maxpool_forward<T: Scalar>(
    input: &Tensor<T>,
    window: usize,
    stride: usize,
) -> Result<(Tensor<T>, PoolIndices)> {
    let ([n, c, h, w], batched) = batch_dims(input.shape())?;
    let (ho, wo) = pool_output_size(h, w, window, stride)?;
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut idx = Vec::with_capacity(n * c * ho * wo);
    let x = input.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..ho {
            for xo in 0..wo {
                let mut best = base + y * stride * w + xo * stride;
                let mut best_v = x[best];
                for dy in 0..window {
                    let row = base + (y * stride + dy) * w + xo * stride;
                    for dx in 0..window {
                        if x[row + dx] > best_v {
                            best_v = x[row + dx];
                            best = row + dx;
                        }
                    }
                }
                out.push(best_v);
                idx.push(best);
            }
        }
    }
    let shape = restore_rank(batched, n, &[c, ho, wo]);
    Ok((
        Tensor::new(shape, out)?,
        PoolIndices {
            input_shape: input.shape().to_vec(),
            indices: idx,
        },
    ))
}

/// Routes each upstream gradient to its argmax source, summing collisions.
pub fn maxpool_backward<T: Scalar>(indices: &PoolIndices, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if grad_out.len() != indices.indices.len() {
        return Err(Error::Shape(format!(
            "grad_out has {} values, pooling produced {}",
            grad_out.len(),
            indices.indices.len()
        )));
    }
    let mut grad = Tensor::zeros(indices.input_shape.clone());
    let g = grad.data_mut();
    for (&src, &v) in indices.indices.iter().zip(grad_out.data()) {
        g[src] += v;
    }
    Ok(grad)
}
