//! Differentiable layer primitives.

mod batchnorm;
mod connectivity;
mod conv;
mod dense;
mod pool;
mod softmax;

pub use batchnorm::{
    batchnorm_backward, batchnorm_forward, batchnorm_infer, BatchNorm, BatchNormCache, Mode, BN_EPSILON,
    BN_MOMENTUM,
};
pub use connectivity::Connectivity;
pub use conv::{
    conv_backward, conv_backward_with, conv_forward, conv_forward_counted, conv_forward_with, conv_output_size,
    ConvGrads, ConvLayer, MacCounter,
};
pub use dense::{dense_backward, dense_forward, DenseLayer};
pub use pool::{maxpool_backward, maxpool_forward, pool_output_size, PoolIndices};
pub use softmax::{argmax, softmax, softmax_xent, softmax_xent_batch};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn relu<T: Scalar>(x: &mut Tensor<T>) {
    for v in x.data_mut() {
        if !(*v > T::zero()) {
            *v = T::zero();
        }
    }
}

/// Zeroes upstream gradient where the activation was clipped.
pub fn relu_backward<T: Scalar>(activation: &Tensor<T>, grad: &mut Tensor<T>) {
    for (g, &a) in grad.data_mut().iter_mut().zip(activation.data()) {
        if !(a > T::zero()) {
            *g = T::zero();
        }
    }
}
