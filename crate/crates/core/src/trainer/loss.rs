//! Losses: softmax cross-entropy, soft Dice, and their lambda-weighted
//! combination, each with the gradient at its head.

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// Smoothing added to the Dice numerator and denominator; defines the
/// empty-mask case and stabilizes gradients.
pub const DICE_EPS: f64 = 1e-6;

fn softmax2(row: &[f32]) -> (f64, f64) {
    let (a, b) = (row[0] as f64, row[1] as f64);
    let m = a.max(b);
    let ea = (a - m).exp();
    let eb = (b - m).exp();
    let z = ea + eb;
    (ea / z, eb / z)
}

/// Mean softmax cross-entropy of N x 2 logits against binary labels.
/// Stabilized with log-sum-exp; always >= 0.
pub fn cross_entropy(logits: &Tensor, labels: &[u8]) -> Result<f64> {
    check_logits(logits, labels)?;
    let mut total = 0f64;
    for (row, &y) in logits.data().chunks_exact(2).zip(labels) {
        let (a, b) = (row[0] as f64, row[1] as f64);
        let m = a.max(b);
        let lse = m + ((a - m).exp() + (b - m).exp()).ln();
        let z_true = if y == 0 { a } else { b };
        total += lse - z_true;
    }
    Ok(total / labels.len() as f64)
}

/// Cross-entropy plus its gradient w.r.t. the logits: (softmax - onehot) / N.
pub fn cross_entropy_grad(logits: &Tensor, labels: &[u8]) -> Result<(f64, Tensor)> {
    let loss = cross_entropy(logits, labels)?;
    let n = labels.len() as f64;
    let mut grad = Tensor::zeros(logits.shape());
    for ((g, row), &y) in grad.data_mut().chunks_exact_mut(2).zip(logits.data().chunks_exact(2)).zip(labels) {
        let (p0, p1) = softmax2(row);
        g[0] = ((p0 - f64::from(y == 0)) / n) as f32;
        g[1] = ((p1 - f64::from(y == 1)) / n) as f32;
    }
    Ok((loss, grad))
}

/// Mean soft Dice loss over a batch: per sample
/// `1 - (2 sum(p g) + eps) / (sum p + sum g + eps)`. Both masks empty gives 0.
pub fn dice_loss(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    check_masks(pred, gt)?;
    let n = pred.shape()[0];
    let sz = pred.len() / n;
    let mut total = 0f64;
    for i in 0..n {
        let p = &pred.data()[i * sz..(i + 1) * sz];
        let g = &gt.data()[i * sz..(i + 1) * sz];
        let (mut inter, mut sp, mut sg) = (0f64, 0f64, 0f64);
        for (&pv, &gv) in p.iter().zip(g) {
            inter += pv as f64 * gv as f64;
            sp += pv as f64;
            sg += gv as f64;
        }
        total += 1.0 - (2.0 * inter + DICE_EPS) / (sp + sg + DICE_EPS);
    }
    Ok(total / n as f64)
}

/// Dice loss plus its gradient w.r.t. the predicted probabilities.
pub fn dice_loss_grad(pred: &Tensor, gt: &Tensor) -> Result<(f64, Tensor)> {
    check_masks(pred, gt)?;
    let n = pred.shape()[0];
    let sz = pred.len() / n;
    let mut total = 0f64;
    let mut grad = Tensor::zeros(pred.shape());
    for i in 0..n {
        let p = &pred.data()[i * sz..(i + 1) * sz];
        let g = &gt.data()[i * sz..(i + 1) * sz];
        let (mut inter, mut sp, mut sg) = (0f64, 0f64, 0f64);
        for (&pv, &gv) in p.iter().zip(g) {
            inter += pv as f64 * gv as f64;
            sp += pv as f64;
            sg += gv as f64;
        }
        let num = 2.0 * inter + DICE_EPS;
        let den = sp + sg + DICE_EPS;
        total += 1.0 - num / den;
        // d/dp_j [1 - num/den] = -(2 g_j den - num) / den^2, averaged over batch.
        let gd = &mut grad.data_mut()[i * sz..(i + 1) * sz];
        for (out, &gv) in gd.iter_mut().zip(g) {
            *out = (-((2.0 * gv as f64) * den - num) / (den * den) / n as f64) as f32;
        }
    }
    Ok((total / n as f64, grad))
}

/// `lambda * cross_entropy + (1 - lambda) * dice`.
pub fn combined_loss(
    logits: &Tensor,
    labels: &[u8],
    pred_masks: &Tensor,
    gt_masks: &Tensor,
    lambda: f64,
) -> Result<f64> {
    let ce = cross_entropy(logits, labels)?;
    let di = dice_loss(pred_masks, gt_masks)?;
    Ok(lambda * ce + (1.0 - lambda) * di)
}

fn check_logits(logits: &Tensor, labels: &[u8]) -> Result<()> {
    if logits.rank() != 2 || logits.shape()[1] != 2 || logits.shape()[0] != labels.len() {
        return Err(CoreError::ShapeMismatch {
            op: "cross_entropy",
            detail: format!("logits {:?} vs {} labels", logits.shape(), labels.len()),
        });
    }
    Ok(())
}

fn check_masks(pred: &Tensor, gt: &Tensor) -> Result<()> {
    if pred.shape() != gt.shape() || pred.rank() != 3 {
        return Err(CoreError::ShapeMismatch {
            op: "dice_loss",
            detail: format!("predicted {:?} vs ground truth {:?}", pred.shape(), gt.shape()),
        });
    }
    Ok(())
}
