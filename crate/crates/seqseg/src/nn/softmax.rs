//! Softmax cross-entropy on logit vectors.

use ndarray::Array1;

use crate::scalar::Scalar;

/// Numerically stable softmax.
pub fn softmax<S: Scalar>(logits: &Array1<S>) -> Array1<S> {
    let m = logits.iter().copied().fold(S::neg_infinity(), S::max);
    let exps = logits.mapv(|z| (z - m).exp());
    let total = exps.sum();
    exps / total
}

/// Cross-entropy of `softmax(logits)` against a hard class label.
/// Returns the loss and its gradient w.r.t. the logits (`p - onehot`).
pub fn cross_entropy_logits<S: Scalar>(logits: &Array1<S>, class: usize) -> (S, Array1<S>) {
    assert!(class < logits.len(), "class {class} out of range for {} logits", logits.len());
    let m = logits.iter().copied().fold(S::neg_infinity(), S::max);
    let log_sum: S = logits.iter().map(|&z| (z - m).exp()).sum::<S>().ln() + m;
    let loss = log_sum - logits[class];
    let mut dlogits = softmax(logits);
    dlogits[class] = dlogits[class] - S::one();
    (loss, dlogits)
}
