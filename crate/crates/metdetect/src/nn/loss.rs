//! Segmentation losses: soft Dice plus an equally weighted cross-entropy
//! term, both with exact gradients.

use super::{softmax_channels, Tensor4};
use crate::error::{Error, Result};

pub const DICE_SMOOTHING: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub dice: f64,
    pub cross_entropy: f64,
}

fn check_same_spatial(a: &Tensor4, b: &Tensor4) -> Result<()> {
    if a.shape[0] != b.shape[0] || a.shape[2] != b.shape[2] || a.shape[3] != b.shape[3] {
        return Err(Error::Shape(format!(
            "shapes {:?} and {:?} do not share batch/spatial dims",
            a.shape, b.shape
        )));
    }
    Ok(())
}

/// Soft Dice loss over the foreground probability channel, summed over batch
/// and space: `1 - (2*sum(p*g) + s) / (sum(p) + sum(g) + s)`.
///
/// Returns the loss and its gradient with respect to the probabilities.
pub fn softdice_loss(probs: &Tensor4, target: &Tensor4) -> Result<(f64, Tensor4)> {
    if probs.shape != target.shape {
        return Err(Error::Shape(format!(
            "probability shape {:?} does not match target shape {:?}",
            probs.shape, target.shape
        )));
    }
    let s = DICE_SMOOTHING;
    let mut inter = 0.0;
    let mut psum = 0.0;
    let mut gsum = 0.0;
    for (&p, &g) in probs.data.iter().zip(&target.data) {
        inter += p * g;
        psum += p;
        gsum += g;
    }
    let num = 2.0 * inter + s;
    let den = psum + gsum + s;
    let loss = 1.0 - num / den;

    let den2 = den * den;
    let mut grad = Tensor4::zeros(probs.shape);
    for ((gr, &g), _) in grad.data.iter_mut().zip(&target.data).zip(&probs.data) {
        *gr = -(2.0 * g * den - num) / den2;
    }
    Ok((loss, grad))
}

/// Two-channel softmax cross-entropy, averaged over batch and space.
///
/// Target holds the foreground indicator (channel 1 is foreground). The
/// gradient with respect to the logits is `(softmax - onehot) / n`.
pub fn softmax_crossentropy(logits: &Tensor4, target: &Tensor4) -> Result<(f64, Tensor4)> {
    if logits.shape[1] != 2 {
        return Err(Error::Shape(format!(
            "cross-entropy expects 2 logit channels, got shape {:?}",
            logits.shape
        )));
    }
    if target.shape[1] != 1 {
        return Err(Error::Shape(format!(
            "target must have a single channel, got shape {:?}",
            target.shape
        )));
    }
    check_same_spatial(logits, target)?;

    let probs = softmax_channels(logits);
    let [b, _, h, w] = logits.shape;
    let n = (b * h * w) as f64;
    let plane = h * w;

    let mut loss = 0.0;
    let mut grad = Tensor4::zeros(logits.shape);
    for bi in 0..b {
        for p in 0..plane {
            let fg = target.data[bi * plane + p];
            let p0 = probs.data[(bi * 2) * plane + p];
            let p1 = probs.data[(bi * 2 + 1) * plane + p];
            let p_target = if fg > 0.5 { p1 } else { p0 };
            loss -= p_target.max(1e-300).ln();
            let (y0, y1) = if fg > 0.5 { (0.0, 1.0) } else { (1.0, 0.0) };
            grad.data[(bi * 2) * plane + p] = (p0 - y0) / n;
            grad.data[(bi * 2 + 1) * plane + p] = (p1 - y1) / n;
        }
    }
    Ok((loss / n, grad))
}

/// Total training loss: soft Dice on the foreground softmax channel plus the
/// equally weighted cross-entropy term. Returns the loss components and the
/// exact gradient with respect to the logits.
pub fn segmentation_loss(logits: &Tensor4, target: &Tensor4) -> Result<(LossValues, Tensor4)> {
    let probs = softmax_channels(logits);
    let [b, _, h, w] = logits.shape;
    let plane = h * w;

    // foreground channel as its own tensor
    let mut p_fg = Tensor4::zeros([b, 1, h, w]);
    for bi in 0..b {
        p_fg.plane_mut(bi, 0).copy_from_slice(probs.plane(bi, 1));
    }
    let (dice, d_pfg) = softdice_loss(&p_fg, target)?;
    let (ce, mut grad) = softmax_crossentropy(logits, target)?;

    // chain the Dice gradient through the two-channel softmax:
    // dp1/dz1 = p1 (1 - p1), dp1/dz0 = -p1 (1 - p1)
    for bi in 0..b {
        for p in 0..plane {
            let p1 = probs.data[(bi * 2 + 1) * plane + p];
            let jac = p1 * (1.0 - p1);
            let dd = d_pfg.data[bi * plane + p] * jac;
            grad.data[(bi * 2 + 1) * plane + p] += dd;
            grad.data[(bi * 2) * plane + p] -= dd;
        }
    }
    Ok((
        LossValues {
            total: dice + ce,
            dice,
            cross_entropy: ce,
        },
        grad,
    ))
}
