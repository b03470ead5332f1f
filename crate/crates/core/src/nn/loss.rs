use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean squared error over every element, with its gradient w.r.t. `pred`.
pub fn mse(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    pred.check_same_shape(target)?;
    let n = pred.len().max(1) as f64;
    let mut grad = pred.clone();
    let mut sum = 0.0;
    for (g, t) in grad.data_mut().iter_mut().zip(target.data()) {
        let d = *g - t;
        sum += d * d;
        *g = 2.0 * d / n;
    }
    Ok((sum / n, grad))
}

/// Row-wise softmax of a `(n, classes)` logit matrix.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let (_, k) = logits.dims2()?;
    let mut out = logits.clone();
    for row in out.data_mut().chunks_exact_mut(k) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    Ok(out)
}

/// Mean categorical cross-entropy (natural log) and its gradient w.r.t. the
/// logits.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (n, k) = logits.dims2()?;
    if labels.len() != n {
        return Err(Error::shape(format!("{n} logit rows but {} labels", labels.len())));
    }
    let mut grad = softmax(logits)?;
    let mut loss = 0.0;
    for (row, &y) in grad.data_mut().chunks_exact_mut(k).zip(labels) {
        if y >= k {
            return Err(Error::contract(format!("label {y} out of range for {k} classes")));
        }
        loss -= row[y].max(f64::MIN_POSITIVE).ln();
        row[y] -= 1.0;
        row.iter_mut().for_each(|v| *v /= n as f64);
    }
    Ok((loss / n as f64, grad))
}
