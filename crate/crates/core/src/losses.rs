//! Cross-entropy losses with analytic gradients with respect to the logits.
//!
//! [`logitnorm_ce`] divides the logit vector by `tau * ‖H‖` before the softmax,
//! so only the direction of `H` is scored. The gradient is taken through the
//! norm as well; there is no stop-gradient on `‖H‖`.

use crate::error::{Error, Result};

/// Default temperature for logit normalization.
pub const DEFAULT_TAU: f64 = 0.1;

/// Floor applied to `‖H‖`; all-zero logits therefore give a uniform softmax.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub loss: f64,
    /// d loss / d logits
    pub grad: Vec<f64>,
}

/// Which loss to apply to a logit vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    SoftmaxCe,
    LogitNorm { tau: f64 },
}

impl LossKind {
    pub fn evaluate(self, logits: &[f64], label: usize) -> Result<LossValue> {
        match self {
            LossKind::SoftmaxCe => softmax_ce(logits, label),
            LossKind::LogitNorm { tau } => logitnorm_ce(logits, label, tau),
        }
    }
}

fn check(logits: &[f64], label: usize) -> Result<()> {
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange {
            label,
            len: logits.len(),
        });
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    Ok(())
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = p.iter().sum();
    for v in p.iter_mut() {
        *v /= sum;
    }
    p
}

/// Returns `(softmax, log-sum-exp)` of `z`.
fn softmax_lse(z: &[f64]) -> (Vec<f64>, f64) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = z.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = p.iter().sum();
    for v in p.iter_mut() {
        *v /= sum;
    }
    (p, max + sum.ln())
}

/// `lse − z_y`, via `ln_1p` when that cannot overflow so small losses keep
/// full relative precision.
fn nll(z: &[f64], label: usize, lse: f64) -> f64 {
    let zy = z[label];
    let gap = z.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v - zy));
    if gap < 700.0 {
        let rest: f64 = z
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != label)
            .map(|(_, &v)| (v - zy).exp())
            .sum();
        rest.ln_1p()
    } else {
        (lse - zy).max(0.0)
    }
}

pub fn softmax_ce(logits: &[f64], label: usize) -> Result<LossValue> {
    check(logits, label)?;
    let (mut grad, lse) = softmax_lse(logits);
    let loss = nll(logits, label, lse);
    grad[label] -= 1.0;
    Ok(LossValue { loss, grad })
}

pub fn logitnorm_ce(logits: &[f64], label: usize, tau: f64) -> Result<LossValue> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::InvalidConfig(format!("tau must be positive, got {tau}")));
    }
    check(logits, label)?;
    let raw_norm = crate::linalg::norm(logits);
    let floored = raw_norm < NORM_FLOOR;
    let n = raw_norm.max(NORM_FLOOR);
    let scale = 1.0 / (tau * n);
    let z: Vec<f64> = logits.iter().map(|l| l * scale).collect();
    let (mut g, lse) = softmax_lse(&z);
    let loss = nll(&z, label, lse);
    g[label] -= 1.0;
    // dz_i/dl_j = scale·δ_ij − l_i l_j / (tau n³)
    let radial = if floored {
        0.0
    } else {
        crate::linalg::dot(&g, logits) / (tau * n * n * n)
    };
    let grad = g.iter().zip(logits).map(|(gi, li)| gi * scale - li * radial).collect();
    Ok(LossValue { loss, grad })
}

/// Index of the largest logit, lowest index on ties.
pub fn argmax_class(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Largest softmax probability of raw logits.
pub fn max_confidence(logits: &[f64]) -> f64 {
    softmax(logits).into_iter().fold(0.0, f64::max)
}
