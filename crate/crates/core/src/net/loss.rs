//! Cross-entropy restricted to voxels that are not true negatives.

use super::model::Real;
use crate::error::{Error, Result};

/// Probabilities are clamped to `[CLAMP, 1 - CLAMP]` before the logarithm.
pub const CLAMP: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub struct MaskedLoss<T> {
    pub loss: T,
    /// Voxels contributing to the loss: ground truth foreground or
    /// predicted foreground.
    pub mask: Vec<bool>,
    /// Gradient w.r.t. the `[background, foreground]` logits, two per voxel.
    pub grad_logits: Vec<T>,
}

/// Masked binary cross-entropy of foreground probabilities `p_fg` against
/// binary `labels`. The prediction is the argmax class (ties go to
/// background) and the mask is held constant, so membership carries no
/// gradient.
pub fn masked_cross_entropy<T: Real>(p_fg: &[T], labels: &[bool]) -> Result<MaskedLoss<T>> {
    if p_fg.len() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} probabilities for {} labels",
            p_fg.len(),
            labels.len()
        )));
    }
    let lo = T::from_f64(CLAMP);
    let hi = T::one() - lo;
    let half = T::from_f64(0.5);
    let mut loss = T::zero();
    let mut mask = Vec::with_capacity(labels.len());
    let mut grad = vec![T::zero(); 2 * labels.len()];
    for (v, (&p, &y)) in p_fg.iter().zip(labels).enumerate() {
        let predicted_fg = p > half;
        let m = y || predicted_fg;
        mask.push(m);
        if !m {
            continue;
        }
        let pc = p.max(lo).min(hi);
        loss += if y { -pc.ln() } else { -(T::one() - pc).ln() };
        // d/dl_fg of the clamped loss: zero where the clamp is active
        if p >= lo && p <= hi {
            let t = if y { T::one() } else { T::zero() };
            let g = p - t;
            grad[2 * v] = -g;
            grad[2 * v + 1] = g;
        }
    }
    Ok(MaskedLoss {
        loss,
        mask,
        grad_logits: grad,
    })
}
