//! Pixel-level segmentation metrics.

use crate::error::{Error, Result};
use crate::graph::ModelGraph;
use crate::par;
use crate::train::Dataset;

/// IoU and Dice of the foreground (non-zero labels). Both are 1 when neither
/// mask has any foreground.
pub fn metrics_pair(pred: &[u8], gt: &[u8]) -> Result<(f64, f64)> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch {
            op: "metrics_pair",
            detail: format!("{} predicted pixels, {} ground-truth", pred.len(), gt.len()),
        });
    }
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(gt) {
        let (a, b) = (a != 0, b != 0);
        inter += (a && b) as usize;
        p += a as usize;
        g += b as usize;
    }
    if p + g == 0 {
        return Ok((1.0, 1.0));
    }
    let union = p + g - inter;
    Ok((inter as f64 / union as f64, 2.0 * inter as f64 / (p + g) as f64))
}

/// Per-pixel argmax over the class channel; ties go to the lower class.
pub fn argmax_classes(logits: &crate::tensor::Tensor<f32>) -> Vec<u8> {
    let s = logits.shape();
    let (c, plane) = (s.c(), s.plane());
    let x = logits.data();
    let mut out = Vec::with_capacity(s.n() * plane);
    for n in 0..s.n() {
        for p in 0..plane {
            let mut best = 0;
            for k in 1..c {
                if x[(n * c + k) * plane + p] > x[(n * c + best) * plane + p] {
                    best = k;
                }
            }
            out.push(best as u8);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub mean_iou: f64,
    pub dice: f64,
    /// (iou, dice) per image, in dataset order.
    pub per_image: Vec<(f64, f64)>,
}

/// Inference-mode evaluation averaged over images.
pub fn evaluate(model: &ModelGraph<f32>, dataset: &Dataset) -> Result<Metrics> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let per_image = par::map_indexed(dataset.len(), |i| {
        let s = &dataset.samples()[i];
        let logits = model.infer(&s.image)?;
        metrics_pair(&argmax_classes(&logits), &s.mask)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let n = per_image.len() as f64;
    Ok(Metrics {
        mean_iou: per_image.iter().map(|m| m.0).sum::<f64>() / n,
        dice: per_image.iter().map(|m| m.1).sum::<f64>() / n,
        per_image,
    })
}
