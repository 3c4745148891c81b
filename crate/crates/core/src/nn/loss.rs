//! Softmax and categorical cross-entropy.

use super::{Scalar, Tensor};

/// Row-wise softmax of an `[N, K]` logit matrix, max-shifted for stability.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    assert_eq!(logits.rank(), 2, "softmax expects [N, K]");
    let k = logits.shape()[1];
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    out
}

/// Mean categorical cross-entropy of `softmax(logits)` against integer labels,
/// and its gradient with respect to the logits.
///
/// `class_weights`, when given, scales each sample's term by the weight of its
/// true class; the mean is then normalized by the summed weights.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
    class_weights: Option<&[f64]>,
) -> (f64, Tensor<T>) {
    let n = logits.shape()[0];
    let k = logits.shape()[1];
    assert_eq!(labels.len(), n, "one label per row");
    let probs = softmax(logits);
    let weights: Vec<f64> = labels
        .iter()
        .map(|&y| class_weights.map_or(1.0, |w| w[y]))
        .collect();
    let total: f64 = weights.iter().sum();
    let mut loss = 0.0;
    let mut grad = probs.clone();
    for (i, (row, &y)) in grad.data_mut().chunks_mut(k).zip(labels).enumerate() {
        assert!(y < k, "label {y} out of range for {k} classes");
        let logp = log_softmax_entry(logits.item(i), y);
        loss -= weights[i] * logp;
        row[y] -= T::one();
        let scale = T::from_f64_lossy(weights[i] / total);
        row.iter_mut().for_each(|g| *g *= scale);
    }
    (loss / total, grad)
}

/// `log softmax(row)[y]` evaluated in f64 without forming the probability.
fn log_softmax_entry<T: Scalar>(row: &[T], y: usize) -> f64 {
    let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln() + max;
    row[y].as_f64() - lse
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_k() {
        let logits = Tensor::<f64>::zeros(&[4, 3]);
        let (loss, _) = softmax_cross_entropy(&logits, &[0, 1, 2, 0], None);
        assert!((loss - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_are_stochastic_even_for_large_logits() {
        let logits = Tensor::<f32>::from_vec(&[2, 3], vec![1000.0, 0.0, -1000.0, 3.0, 3.0, 3.0]);
        let p = softmax(&logits);
        for row in p.data().chunks(3) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let logits = Tensor::<f64>::from_vec(&[2, 3], vec![0.3, -1.2, 2.0, 0.5, 0.1, -0.4]);
        let labels = [2, 0];
        let weights = [1.0, 2.5, 0.5];
        for w in [None, Some(&weights[..])] {
            let (_, grad) = softmax_cross_entropy(&logits, &labels, w);
            for i in 0..logits.len() {
                let eps = 1e-6;
                let mut up = logits.clone();
                up.data_mut()[i] += eps;
                let mut down = logits.clone();
                down.data_mut()[i] -= eps;
                let fd = (softmax_cross_entropy(&up, &labels, w).0
                    - softmax_cross_entropy(&down, &labels, w).0)
                    / (2.0 * eps);
                assert!((fd - grad.data()[i]).abs() < 1e-8);
            }
        }
    }
}
