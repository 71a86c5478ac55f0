//! Focal reconstruction loss on masked positions, and the clamped
//! cross-entropy used for residuals.

use crate::error::{Error, Result};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` in every log term.
pub const PROB_EPS: f64 = 1e-7;

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Clamped binary cross-entropy of a logit against a bit.
pub fn bce(logit: f64, bit: f64) -> f64 {
    let p = sigmoid(logit).clamp(PROB_EPS, 1.0 - PROB_EPS);
    -(bit * p.ln() + (1.0 - bit) * (1.0 - p).ln())
}

/// Focal term and its derivative with respect to the logit.
pub fn focal_term(logit: f64, bit: f64, gamma: f64) -> (f64, f64) {
    let raw = sigmoid(logit);
    let p = raw.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let positive = bit >= 0.5;
    let pt = if positive { p } else { 1.0 - p };
    let q = 1.0 - pt;
    let ln_pt = pt.ln();
    let loss = -q.powf(gamma) * ln_pt;
    // the clamp is flat outside the admissible band
    if raw != p {
        return (loss, 0.0);
    }
    let sign = if positive { 1.0 } else { -1.0 };
    let grad = sign * (gamma * pt * q.powf(gamma) * ln_pt - q.powf(gamma + 1.0));
    (loss, grad)
}

/// Mean focal loss over the positions with `masked[i]` set, plus the
/// gradient with respect to every logit (zero at unmasked positions).
pub fn focal_loss(logits: &[f64], targets: &[f64], masked: &[bool], gamma: f64) -> Result<(f64, Vec<f64>)> {
    if logits.len() != targets.len() || logits.len() != masked.len() {
        return Err(Error::ShapeMismatch("focal loss operands".into()));
    }
    let count = masked.iter().filter(|m| **m).count();
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    let scale = 1.0 / count as f64;
    let mut total = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for i in 0..logits.len() {
        if masked[i] {
            let (l, g) = focal_term(logits[i], targets[i], gamma);
            total += l;
            grad[i] = g * scale;
        }
    }
    Ok((total * scale, grad))
}
