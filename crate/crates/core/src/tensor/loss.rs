use crate::error::{Error, Result};
use crate::real::Real;

use super::Tensor;

#[derive(Debug, Clone)]
pub struct LossOutput<T = f32> {
    pub loss: f64,
    /// d loss / d logits, already divided by the pixel count.
    pub grad: Tensor<T>,
}

/// Pixel-wise softmax cross-entropy averaged over N·H·W. `labels` is laid out
/// as (N, H, W).
pub fn softmax_cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[u8]) -> Result<LossOutput<T>> {
    let s = logits.shape();
    let (n, c, plane) = (s.n(), s.c(), s.plane());
    if labels.len() != n * plane {
        return Err(Error::ShapeMismatch {
            op: "softmax_cross_entropy",
            detail: format!("{} labels for logits {s}", labels.len()),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= c) {
        return Err(Error::LabelOutOfRange {
            label: bad as usize,
            classes: c,
        });
    }
    let count = (n * plane) as f64;
    let x = logits.data();
    let mut grad = vec![T::zero(); s.len()];
    let mut total = 0.0f64;
    let mut probs = vec![0.0f64; c];
    for b in 0..n {
        for p in 0..plane {
            let at = |k: usize| (b * c + k) * plane + p;
            let max = (0..c).map(|k| x[at(k)].as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (k, pr) in probs.iter_mut().enumerate() {
                *pr = (x[at(k)].as_f64() - max).exp();
                z += *pr;
            }
            let label = labels[b * plane + p] as usize;
            total += z.ln() - (x[at(label)].as_f64() - max);
            for (k, pr) in probs.iter().enumerate() {
                let onehot = if k == label { 1.0 } else { 0.0 };
                grad[at(k)] = T::from_f64_lossy((pr / z - onehot) / count);
            }
        }
    }
    let loss = total / count;
    if !loss.is_finite() {
        return Err(Error::NonFinite("softmax_cross_entropy"));
    }
    Ok(LossOutput {
        loss,
        grad: Tensor::from_vec(s, grad)?,
    })
}
