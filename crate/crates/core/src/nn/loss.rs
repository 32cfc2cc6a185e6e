use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean softmax cross-entropy over the batch, and its gradient w.r.t. the logits.
pub fn loss_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let [n, k] = logits.shape()[..] else {
        return Err(Error::Geometry(format!(
            "logits must be [N,K], got {:?}",
            logits.shape()
        )));
    };
    if labels.len() != n {
        return Err(Error::InvalidArgument(format!(
            "{} labels for a batch of {n}",
            labels.len()
        )));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::LabelOutOfRange { label, classes: k });
    }
    let mut grad = vec![0.0; n * k];
    let mut total = 0.0;
    let inv_n = 1.0 / n.max(1) as f64;
    for (row, (&label, g)) in logits
        .data()
        .chunks_exact(k)
        .zip(labels.iter().zip(grad.chunks_exact_mut(k)))
    {
        let mut top = 0;
        for (i, &x) in row.iter().enumerate() {
            if x > row[top] {
                top = i;
            }
        }
        let max = row[top];
        // ln Σ exp(x - max) = ln_1p(Σ_{i≠top} exp(x_i - max)), exact near saturation
        let mut rest = 0.0;
        for (i, (gi, &x)) in g.iter_mut().zip(row).enumerate() {
            *gi = (x - max).exp();
            if i != top {
                rest += *gi;
            }
        }
        let z = 1.0 + rest;
        total += rest.ln_1p() + (max - row[label]);
        for gi in g.iter_mut() {
            *gi = *gi / z * inv_n;
        }
        g[label] -= inv_n;
    }
    Ok((total * inv_n, Tensor::new(vec![n, k], grad)?))
}

/// Index of the first maximal logit in each row.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape().get(1).copied().unwrap_or(1).max(1);
    logits
        .data()
        .chunks_exact(k)
        .map(|row| {
            let mut best = 0;
            for (i, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Number of rows whose argmax equals the label.
pub fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    argmax_rows(logits)
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count()
}
