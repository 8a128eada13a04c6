use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Infer,
}

/// Per-map batch normalization parameters and running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub(crate) gamma: Vec<T>,
    pub(crate) beta: Vec<T>,
    pub(crate) running_mean: Vec<T>,
    pub(crate) running_var: Vec<T>,
    pub(crate) momentum: f64,
    pub(crate) epsilon: f64,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(maps: usize) -> Self {
        BatchNorm {
            gamma: vec![T::one(); maps],
            beta: vec![T::zero(); maps],
            running_mean: vec![T::zero(); maps],
            running_var: vec![T::one(); maps],
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
        }
    }

    pub fn maps(&self) -> usize {
        self.gamma.len()
    }
    pub fn gamma(&self) -> &[T] {
        &self.gamma
    }
    pub fn gamma_mut(&mut self) -> &mut [T] {
        &mut self.gamma
    }
    pub fn beta(&self) -> &[T] {
        &self.beta
    }
    pub fn beta_mut(&mut self) -> &mut [T] {
        &mut self.beta
    }
    pub fn running_mean(&self) -> &[T] {
        &self.running_mean
    }
    pub fn running_mean_mut(&mut self) -> &mut [T] {
        &mut self.running_mean
    }
    pub fn running_var(&self) -> &[T] {
        &self.running_var
    }
    pub fn running_var_mut(&mut self) -> &mut [T] {
        &mut self.running_var
    }
    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }
    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn with_hyper(mut self, momentum: f64, epsilon: f64) -> Self {
        self.momentum = momentum;
        self.epsilon = epsilon;
        self
    }

    /// Keeps the listed maps only.
    pub(crate) fn select(&self, keep: &[usize]) -> Self {
        let pick = |v: &[T]| keep.iter().map(|&j| v[j]).collect::<Vec<_>>();
        BatchNorm {
            gamma: pick(&self.gamma),
            beta: pick(&self.beta),
            running_mean: pick(&self.running_mean),
            running_var: pick(&self.running_var),
            momentum: self.momentum,
            epsilon: self.epsilon,
        }
    }
}

/// Saved state of a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    gamma: Vec<T>,
}

fn dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [n, c] => Ok((n, c, 1)),
        [n, c, h, w] => Ok((n, c, h * w)),
        _ => Err(Error::Shape(format!("batch norm expects [n,c] or [n,c,h,w], got {shape:?}"))),
    }
}

/// Normalizes per map. `Train` uses batch statistics and updates the running
/// estimates (`r <- m*r + (1-m)*batch`, unbiased variance); `Infer` uses the
/// running estimates.
pub fn batchnorm_forward<T: Scalar>(
    x: &Tensor<T>,
    params: &mut BatchNorm<T>,
    mode: Mode,
) -> Result<(Tensor<T>, Option<BatchNormCache<T>>)> {
    let (n, c, plane) = dims(x.shape())?;
    if c != params.maps() {
        return Err(Error::Shape(format!("batch norm has {} maps, input {c}", params.maps())));
    }
    match mode {
        Mode::Infer => Ok((batchnorm_infer(x, params)?, None)),
        Mode::Train => {
            if n < 2 {
                return Err(Error::InvalidArgument("training-mode batch norm needs a batch of at least 2".into()));
            }
            let m = (n * plane) as f64;
            let mut y = Tensor::zeros(x.shape().to_vec());
            let mut xhat = Tensor::zeros(x.shape().to_vec());
            let mut inv_std = vec![T::zero(); c];
            let xd = x.data();
            for ch in 0..c {
                let mut sum = 0.0f64;
                for s in 0..n {
                    let base = (s * c + ch) * plane;
                    sum += xd[base..base + plane].iter().map(|v| v.as_f64()).sum::<f64>();
                }
                let mean = sum / m;
                let mut sq = 0.0f64;
                for s in 0..n {
                    let base = (s * c + ch) * plane;
                    sq += xd[base..base + plane].iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>();
                }
                let var = sq / m;
                let istd = 1.0 / (var + params.epsilon).sqrt();
                inv_std[ch] = T::of(istd);
                let (meant, istdt) = (T::of(mean), T::of(istd));
                let (gm, bt) = (params.gamma[ch], params.beta[ch]);
                for s in 0..n {
                    let base = (s * c + ch) * plane;
                    for j in base..base + plane {
                        let xh = (xd[j] - meant) * istdt;
                        xhat.data_mut()[j] = xh;
                        y.data_mut()[j] = gm * xh + bt;
                    }
                }
                let mo = params.momentum;
                let unbiased = if m > 1.0 { var * m / (m - 1.0) } else { var };
                params.running_mean[ch] = T::of(mo * params.running_mean[ch].as_f64() + (1.0 - mo) * mean);
                params.running_var[ch] = T::of(mo * params.running_var[ch].as_f64() + (1.0 - mo) * unbiased);
            }
            let cache = BatchNormCache {
                xhat,
                inv_std,
                gamma: params.gamma.clone(),
            };
            Ok((y, Some(cache)))
        }
    }
}

pub fn batchnorm_infer<T: Scalar>(x: &Tensor<T>, params: &BatchNorm<T>) -> Result<Tensor<T>> {
    let (n, c, plane) = dims(x.shape())?;
    if c != params.maps() {
        return Err(Error::Shape(format!("batch norm has {} maps, input {c}", params.maps())));
    }
    let mut y = x.clone();
    let eps = T::of(params.epsilon);
    for ch in 0..c {
        let scale = params.gamma[ch] / (params.running_var[ch] + eps).sqrt();
        let shift = params.beta[ch] - scale * params.running_mean[ch];
        for s in 0..n {
            let base = (s * c + ch) * plane;
            for v in &mut y.data_mut()[base..base + plane] {
                *v = scale * *v + shift;
            }
        }
    }
    Ok(y)
}

/// Returns `(grad_x, grad_gamma, grad_beta)`.
pub fn batchnorm_backward<T: Scalar>(
    cache: &BatchNormCache<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    if grad_out.shape() != cache.xhat.shape() {
        return Err(Error::Shape("grad_out does not match cached batch".into()));
    }
    let (n, c, plane) = dims(grad_out.shape())?;
    let m = (n * plane) as f64;
    let mut gx = Tensor::zeros(grad_out.shape().to_vec());
    let mut gg = vec![T::zero(); c];
    let mut gbeta = vec![T::zero(); c];
    let g = grad_out.data();
    let xh = cache.xhat.data();
    for ch in 0..c {
        let mut sum_g = 0.0f64;
        let mut sum_gx = 0.0f64;
        for s in 0..n {
            let base = (s * c + ch) * plane;
            for j in base..base + plane {
                sum_g += g[j].as_f64();
                sum_gx += (g[j] * xh[j]).as_f64();
            }
        }
        gbeta[ch] = T::of(sum_g);
        gg[ch] = T::of(sum_gx);
        let k = cache.gamma[ch].as_f64() * cache.inv_std[ch].as_f64() / m;
        let (kt, mt, sgt, sgxt) = (T::of(k), T::of(m), T::of(sum_g), T::of(sum_gx));
        for s in 0..n {
            let base = (s * c + ch) * plane;
            for j in base..base + plane {
                gx.data_mut()[j] = kt * (mt * g[j] - sgt - xh[j] * sgxt);
            }
        }
    }
    Ok((gx, gg, gbeta))
}
