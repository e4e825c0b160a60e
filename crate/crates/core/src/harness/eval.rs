//! Top-k accuracy.

use crate::error::{contract, Result};
use crate::harness::data::Dataset;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Accuracy {
    /// Fraction in [0, 1].
    pub top1: f64,
    /// `None` when the model has fewer than five classes.
    pub top5: Option<f64>,
}

/// Position of `label` when classes are sorted by descending logit, ties
/// broken toward the lower class index.
pub fn label_rank<T: Real>(logits: &[T], label: usize) -> usize {
    let z = logits[label];
    logits
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > z || (v == z && j < label))
        .count()
}

/// Hit counts `(top-1, top-5)` for a `[n, C]` logit matrix.
pub fn topk_hits<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(usize, usize)> {
    let c = match logits.shape() {
        [n, c] if *n == labels.len() => *c,
        s => return Err(contract(format!("logits {s:?} for {} labels", labels.len()))),
    };
    let mut hits = (0, 0);
    for (row, &y) in logits.data().chunks(c).zip(labels) {
        if y >= c {
            return Err(contract(format!("label {y} out of range for {c} classes")));
        }
        let r = label_rank(row, y);
        hits.0 += (r < 1) as usize;
        hits.1 += (r < 5) as usize;
    }
    Ok(hits)
}

/// Top-1/top-5 accuracy of `forward` over `data`, in batches.
pub fn evaluate(
    forward: impl Fn(&Tensor<f32>) -> Result<Tensor<f32>>,
    data: &Dataset,
    batch_size: usize,
) -> Result<Accuracy> {
    if data.is_empty() {
        return Err(contract("evaluate on an empty dataset"));
    }
    let (mut h1, mut h5) = (0, 0);
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut classes = 0;
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = data.batch(chunk);
        let logits = forward(&x)?;
        classes = logits.shape()[1];
        let (a, b) = topk_hits(&logits, &y)?;
        h1 += a;
        h5 += b;
    }
    let n = data.len() as f64;
    Ok(Accuracy {
        top1: h1 as f64 / n,
        top5: (classes >= 5).then(|| h5 as f64 / n),
    })
}
