use crate::error::{Error, Result};
use crate::linalg::{Matrix, Real};

/// Mean cross-entropy of `logits` (`B × K`) against `labels`, and its gradient
/// `(softmax − onehot) / B`.
pub fn cross_entropy<T: Real>(logits: &Matrix<T>, labels: &[usize]) -> Result<(T, Matrix<T>)> {
    let (b, k) = logits.shape();
    if labels.len() != b {
        return Err(Error::shape("cross_entropy", logits.shape(), (labels.len(), 1)));
    }
    let inv_b = T::one() / T::of(b as f64);
    let mut grad = Matrix::zeros(b, k);
    let mut total = T::zero();
    for (i, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::Index(format!("label {label} with {k} classes")));
        }
        let row = logits.row(i);
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        total += log_z - row[label];
        for (j, g) in grad.row_mut(i).iter_mut().enumerate() {
            let p = (row[j] - log_z).exp();
            let onehot = if j == label { T::one() } else { T::zero() };
            *g = (p - onehot) * inv_b;
        }
    }
    Ok((total * inv_b, grad))
}

/// Index of the largest entry of each row (first on ties).
pub fn argmax_rows<T: Real>(logits: &Matrix<T>) -> Vec<usize> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
