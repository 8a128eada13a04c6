use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Stabilized softmax of one row.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Cross-entropy of one row against `label`.
/// Returns `(loss, probabilities, grad_logits)` with `grad = p - onehot(label)`.
pub fn softmax_xent<T: Scalar>(logits: &[T], label: usize) -> Result<(T, Vec<T>, Vec<T>)> {
    if label >= logits.len() {
        return Err(Error::InvalidArgument(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let shifted: Vec<T> = logits.iter().map(|&z| z - max).collect();
    let total: T = shifted.iter().map(|s| s.exp()).sum();
    let log_total = total.ln();
    let loss = log_total - shifted[label];
    let probs: Vec<T> = shifted.iter().map(|&s| (s - log_total).exp()).collect();
    let mut grad = probs.clone();
    grad[label] -= T::one();
    Ok((loss, probs, grad))
}

/// Mean cross-entropy over a `[n, classes]` batch; the gradient is already
/// divided by `n`.
pub fn softmax_xent_batch<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let n = logits.outer();
    if labels.len() != n || logits.rank() != 2 {
        return Err(Error::Shape(format!(
            "{} labels for logits {:?}",
            labels.len(),
            logits.shape()
        )));
    }
    let scale = T::one() / T::of(n as f64);
    let mut total = T::zero();
    let mut grad = Vec::with_capacity(logits.len());
    for (s, &label) in labels.iter().enumerate() {
        let (loss, _, g) = softmax_xent(logits.outer_slice(s), label)?;
        total += loss;
        grad.extend(g.into_iter().map(|v| v * scale));
    }
    Ok((total * scale, Tensor::new(logits.shape().to_vec(), grad)?))
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln_classes() {
        let (loss, probs, _) = softmax_xent(&[0.3f64; 10], 4).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn huge_logit_is_stable() {
        let mut z = vec![0.0f64; 10];
        z[3] = 1000.0;
        let (loss, probs, grad) = softmax_xent(&z, 3).unwrap();
        assert!(loss.abs() < 1e-12);
        assert!(probs.iter().all(|p| p.is_finite()));
        assert!(grad.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn out_of_range_label() {
        assert!(softmax_xent(&[0.0f64; 3], 3).is_err());
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0f64, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0f64; 5]), 0);
    }
}
