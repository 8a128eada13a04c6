use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Fully connected layer, `y = W x + b`, weights stored `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer<T> {
    pub(crate) weights: Tensor<T>,
    pub(crate) biases: Vec<T>,
}

impl<T: Scalar> DenseLayer<T> {
    pub fn new(weights: Tensor<T>, biases: Vec<T>) -> Result<Self> {
        let &[out, _] = weights.shape() else {
            return Err(Error::Shape(format!("dense weights must be [out,in], got {:?}", weights.shape())));
        };
        if biases.len() != out {
            return Err(Error::Shape(format!("{} biases for {out} outputs", biases.len())));
        }
        Ok(DenseLayer { weights, biases })
    }

    pub fn he_init<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, (2.0 / inputs as f64).sqrt()).expect("positive std");
        DenseLayer {
            weights: Tensor::from_fn(vec![outputs, inputs], |_| T::of(normal.sample(rng))),
            biases: vec![T::zero(); outputs],
        }
    }

    pub fn inputs(&self) -> usize {
        self.weights.shape()[1]
    }
    pub fn outputs(&self) -> usize {
        self.weights.shape()[0]
    }
    pub fn weights(&self) -> &Tensor<T> {
        &self.weights
    }
    pub fn weights_mut(&mut self) -> &mut Tensor<T> {
        &mut self.weights
    }
    pub fn biases(&self) -> &[T] {
        &self.biases
    }
    pub fn biases_mut(&mut self) -> &mut [T] {
        &mut self.biases
    }

    /// Keeps only the listed input columns (ascending).
    pub fn select_inputs(&self, keep: &[usize]) -> Self {
        let (out, inp) = (self.outputs(), self.inputs());
        let mut data = Vec::with_capacity(out * keep.len());
        for o in 0..out {
            let row = &self.weights.data()[o * inp..(o + 1) * inp];
            data.extend(keep.iter().map(|&j| row[j]));
        }
        DenseLayer {
            weights: Tensor::new(vec![out, keep.len()], data).expect("consistent"),
            biases: self.biases.clone(),
        }
    }
}

/// `x` is `[n, in]` (any trailing shape is flattened); returns `[n, out]`.
pub fn dense_forward<T: Scalar>(x: &Tensor<T>, layer: &DenseLayer<T>) -> Result<Tensor<T>> {
    let n = if x.rank() <= 1 { 1 } else { x.outer() };
    let inp = x.len() / n.max(1);
    if inp != layer.inputs() {
        return Err(Error::Shape(format!(
            "dense layer expects {} inputs, got {inp}",
            layer.inputs()
        )));
    }
    let out = layer.outputs();
    let mut y = Tensor::zeros(vec![n, out]);
    T::gemm(n, inp, out, x.data(), (inp, 1), layer.weights.data(), (1, inp), T::zero(), y.data_mut(), (out, 1));
    for row in y.data_mut().chunks_exact_mut(out) {
        for (v, &b) in row.iter_mut().zip(&layer.biases) {
            *v += b;
        }
    }
    let shape = if x.rank() <= 1 { vec![out] } else { vec![n, out] };
    y.reshape(shape)
}

/// Returns `(grad_x, grad_weights, grad_biases)`; `grad_x` has the shape of `x`.
pub fn dense_backward<T: Scalar>(
    x: &Tensor<T>,
    layer: &DenseLayer<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Vec<T>)> {
    let n = if x.rank() <= 1 { 1 } else { x.outer() };
    let (inp, out) = (layer.inputs(), layer.outputs());
    if x.len() != n * inp || grad_out.len() != n * out {
        return Err(Error::Shape("dense backward shapes do not match".into()));
    }
    let mut gx = Tensor::zeros(x.shape().to_vec());
    let mut gw = Tensor::zeros(vec![out, inp]);
    let mut gb = vec![T::zero(); out];
    let g = grad_out.data();
    T::gemm(out, n, inp, g, (1, out), x.data(), (inp, 1), T::zero(), gw.data_mut(), (inp, 1));
    T::gemm(n, out, inp, g, (out, 1), layer.weights.data(), (inp, 1), T::zero(), gx.data_mut(), (inp, 1));
    for row in g.chunks_exact(out) {
        for (acc, &v) in gb.iter_mut().zip(row) {
            *acc += v;
        }
    }
    Ok((gx, gw, gb))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_weights_pass_through() {
        let w = Tensor::from_fn(vec![4, 4], |i| if i % 5 == 0 { 1.0f64 } else { 0.0 });
        let layer = DenseLayer::new(w, vec![0.0; 4]).unwrap();
        let x = Tensor::new(vec![2, 4], vec![1.0, -2.0, 3.5, 0.25, 9.0, 8.0, 7.0, 6.0]).unwrap();
        assert_eq!(dense_forward(&x, &layer).unwrap(), x);
    }

    #[test]
    fn zero_weights_give_bias() {
        let layer = DenseLayer::new(Tensor::<f64>::zeros(vec![3, 5]), vec![1.0, 2.0, 3.0]).unwrap();
        let x = Tensor::from_fn(vec![1, 5], |i| i as f64);
        assert_eq!(dense_forward(&x, &layer).unwrap().data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn shape_mismatch_errors() {
        let layer = DenseLayer::new(Tensor::<f64>::zeros(vec![3, 5]), vec![0.0; 3]).unwrap();
        assert!(dense_forward(&Tensor::zeros(vec![2, 4]), &layer).is_err());
    }
}
