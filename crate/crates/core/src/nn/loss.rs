use crate::tensor::{Float, Tensor, TensorError};

/// Numerically stable softmax (max-subtracted).
pub fn softmax<T: Float>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Cross-entropy of `softmax(logits)` against `label`, with the gradient
/// `softmax(logits) - onehot(label)`.
pub fn softmax_cross_entropy<T: Float>(
    logits: &[T],
    label: usize,
) -> Result<(T, Vec<T>), TensorError> {
    if label >= logits.len() {
        return Err(TensorError::InvalidArgument(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    let loss = total.ln() - (logits[label] - max);
    let mut grad: Vec<T> = exps.into_iter().map(|e| e / total).collect();
    grad[label] -= T::one();
    Ok((loss, grad))
}

/// Batch-mean cross-entropy over `B×K` logits; the gradient is already
/// divided by `B`.
pub fn softmax_cross_entropy_batch<T: Float>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, Tensor<T>), TensorError> {
    let &[b, k] = logits.shape() else {
        return Err(TensorError::InvalidArgument(format!(
            "batch logits must be B×K, got {:?}",
            logits.shape()
        )));
    };
    if labels.len() != b {
        return Err(TensorError::InvalidArgument(format!(
            "{} labels for a batch of {b}",
            labels.len()
        )));
    }
    let scale = T::one() / T::from_f64_lossy(b as f64);
    let mut total = T::zero();
    let mut grad = Vec::with_capacity(b * k);
    for (row, &label) in logits.data().chunks_exact(k).zip(labels) {
        let (loss, g) = softmax_cross_entropy(row, label)?;
        total += loss;
        grad.extend(g.into_iter().map(|v| v * scale));
    }
    Ok((total * scale, Tensor::new([b, k], grad)?))
}
