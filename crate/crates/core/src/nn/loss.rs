use ndarray::{Array2, Axis};

use crate::error::{shape, Result};
use crate::Scalar;

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Array2<T>, labels: &[usize]) -> Result<(T, Array2<T>)> {
    let (n, classes) = logits.dim();
    if labels.len() != n {
        return Err(shape(format!("{} labels for {n} logit rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(shape(format!("label {bad} out of range for {classes} classes")));
    }
    let inv_n = T::one() / T::lit(n as f64);
    let mut grad = Array2::zeros((n, classes));
    let mut total = T::zero();
    for ((row, mut g), &label) in logits.axis_iter(Axis(0)).zip(grad.axis_iter_mut(Axis(0))).zip(labels) {
        let max = row.fold(T::neg_infinity(), |m, &v| m.max(v));
        let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        total += log_z - row[label];
        for (gj, &v) in g.iter_mut().zip(row.iter()) {
            *gj = (v - log_z).exp() * inv_n;
        }
        g[label] -= inv_n;
    }
    Ok((total * inv_n, grad))
}
