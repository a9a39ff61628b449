use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Batch-mean softmax cross-entropy.
///
/// Returns the loss and its gradient with respect to the logits,
/// `(softmax - onehot) / batch`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    if logits.shape().len() != 2 {
        return Err(Error::usage(format!(
            "logits must be [batch, classes], got {:?}",
            logits.shape()
        )));
    }
    let (rows, k) = (logits.rows(), logits.row_len());
    if rows != labels.len() {
        return Err(Error::usage(format!(
            "{} logit rows but {} labels",
            rows,
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::data(format!("label {bad} out of range for {k} classes")));
    }
    let inv = 1.0 / rows as f64;
    let mut grad = Vec::with_capacity(rows * k);
    let mut total = 0.0;
    for (row, &label) in logits.data().chunks(k).zip(labels) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&z| (z - max).exp()).sum();
        let log_z = max + sum.ln();
        total += log_z - row[label];
        for (j, &z) in row.iter().enumerate() {
            let p = (z - log_z).exp();
            let onehot = if j == label { 1.0 } else { 0.0 };
            grad.push((p - onehot) * inv);
        }
    }
    Ok((total * inv, Tensor::new(grad, logits.shape().to_vec())?))
}

/// Index of the largest logit per row; ties go to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.row_len();
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
