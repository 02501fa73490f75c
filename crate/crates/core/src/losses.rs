//! Heatmap objectives in logit space, mask losses and the classifier loss.
//!
//! Every `*_grad` function returns the loss together with its gradient with
//! respect to the logits it was given.

use ndarray::{Array1, Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::data_schema::BinaryMask;
use crate::error::{Error, Result};

/// Clamp bound applied to targets before the inverse sigmoid.
pub const DEFAULT_EPS: f64 = 1e-4;
/// Dice smoothing term.
pub const DICE_SMOOTH: f64 = 1.0;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Weights of the L2, cross-entropy and dice terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub l2: f64,
    pub ce: f64,
    pub dice: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            l2: 1.0,
            ce: 1.0,
            dice: 1.0,
        }
    }
}

impl LossWeights {
    pub fn new(l2: f64, ce: f64, dice: f64) -> Result<Self> {
        let w = Self { l2, ce, dice };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("l2", self.l2), ("ce", self.ce), ("dice", self.dice)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "loss weight {name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Individual terms plus their weighted sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub l2: f64,
    pub ce: f64,
    pub dice: f64,
    pub total: f64,
}

impl LossComponents {
    pub fn is_finite(&self) -> bool {
        self.l2.is_finite() && self.ce.is_finite() && self.dice.is_finite() && self.total.is_finite()
    }
}

fn same_shape(a: (usize, usize), b: (usize, usize), what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{what}: {a:?} vs {b:?}")));
    }
    Ok(())
}

/// Inverse sigmoid of `a` clamped to `[eps, 1 - eps]`.
pub fn logit_transform(a: &Array2<f64>, eps: f64) -> Array2<f64> {
    a.mapv(|v| {
        let p = v.clamp(eps, 1.0 - eps);
        (p / (1.0 - p)).ln()
    })
}

/// Mean squared difference between logits and the target logits.
pub fn heatmap_l2(logits: &Array2<f64>, target: &Array2<f64>, eps: f64) -> Result<f64> {
    Ok(heatmap_l2_grad(logits, target, eps)?.0)
}

pub fn heatmap_l2_grad(logits: &Array2<f64>, target: &Array2<f64>, eps: f64) -> Result<(f64, Array2<f64>)> {
    same_shape(logits.dim(), target.dim(), "heatmap_l2")?;
    let n = logits.len() as f64;
    let diff = logits - &logit_transform(target, eps);
    let loss = diff.mapv(|d| d * d).sum() / n;
    Ok((loss, diff * (2.0 / n)))
}

/// `a > threshold`, elementwise.
pub fn binarize(a: &Array2<f64>, threshold: f64) -> BinaryMask {
    BinaryMask::new(a.mapv(|v| u8::from(v > threshold))).expect("binary values")
}

/// Soft dice loss between probabilities and a binary mask.
pub fn dice_loss(prob: &Array2<f64>, mask: &BinaryMask) -> Result<f64> {
    same_shape(prob.dim(), mask.dim(), "dice_loss")?;
    let m = mask.as_f64();
    let inter = (prob * &m).sum();
    Ok(1.0 - (2.0 * inter + DICE_SMOOTH) / (prob.sum() + m.sum() + DICE_SMOOTH))
}

/// Dice loss of `sigmoid(logits)` and its gradient w.r.t. the logits.
pub fn dice_loss_grad(logits: &Array2<f64>, mask: &BinaryMask) -> Result<(f64, Array2<f64>)> {
    same_shape(logits.dim(), mask.dim(), "dice_loss")?;
    let p = logits.mapv(sigmoid);
    let m = mask.as_f64();
    let num = 2.0 * (&p * &m).sum() + DICE_SMOOTH;
    let den = p.sum() + m.sum() + DICE_SMOOTH;
    let loss = 1.0 - num / den;
    let mut grad = Array2::zeros(p.raw_dim());
    Zip::from(&mut grad).and(&p).and(&m).for_each(|g, &p, &m| {
        let d_p = -(2.0 * m * den - num) / (den * den);
        *g = d_p * p * (1.0 - p);
    });
    Ok((loss, grad))
}

/// Mean binary cross-entropy of logits against a binary mask.
pub fn bce_loss(logits: &Array2<f64>, mask: &BinaryMask) -> Result<f64> {
    Ok(bce_loss_grad(logits, mask)?.0)
}

pub fn bce_loss_grad(logits: &Array2<f64>, mask: &BinaryMask) -> Result<(f64, Array2<f64>)> {
    same_shape(logits.dim(), mask.dim(), "bce_loss")?;
    let n = logits.len() as f64;
    let m = mask.as_f64();
    let mut total = 0.0;
    let mut grad = Array2::zeros(logits.raw_dim());
    Zip::from(&mut grad).and(logits).and(&m).for_each(|g, &x, &m| {
        total += softplus(x) - x * m;
        *g = (sigmoid(x) - m) / n;
    });
    Ok((total / n, grad))
}

/// Weighted sum of the three heatmap terms; the masks come from `target > 0`.
pub fn combined_loss(
    logits: &Array2<f64>,
    target: &Array2<f64>,
    weights: &LossWeights,
    eps: f64,
) -> Result<LossComponents> {
    Ok(combined_loss_grad(logits, target, weights, eps)?.0)
}

pub fn combined_loss_grad(
    logits: &Array2<f64>,
    target: &Array2<f64>,
    weights: &LossWeights,
    eps: f64,
) -> Result<(LossComponents, Array2<f64>)> {
    let (l2, g_l2) = heatmap_l2_grad(logits, target, eps)?;
    let mask = binarize(target, 0.0);
    let (ce, g_ce) = bce_loss_grad(logits, &mask)?;
    let (dice, g_dice) = dice_loss_grad(logits, &mask)?;
    let total = weights.l2 * l2 + weights.ce * ce + weights.dice * dice;
    let grad = g_l2 * weights.l2 + g_ce * weights.ce + g_dice * weights.dice;
    Ok((LossComponents { l2, ce, dice, total }, grad))
}

/// Softmax of a logit vector.
pub fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e = logits.mapv(|v| (v - max).exp());
    let s = e.sum();
    e / s
}

/// Softmax cross-entropy for a two-way prediction.
pub fn classifier_ce(logits: &Array1<f64>, label: usize) -> Result<f64> {
    Ok(classifier_ce_grad(logits, label)?.0)
}

pub fn classifier_ce_grad(logits: &Array1<f64>, label: usize) -> Result<(f64, Array1<f64>)> {
    if logits.len() != 2 {
        return Err(Error::Shape(format!("expected 2 logits, got {}", logits.len())));
    }
    if label > 1 {
        return Err(Error::Invalid(format!("label must be 0 or 1, got {label}")));
    }
    // log-sum-exp of logits relative to the true class; ln_1p keeps the
    // confident-and-correct case accurate.
    let rel = logits.mapv(|v| v - logits[label]);
    let top = rel
        .iter()
        .enumerate()
        .fold(0, |best, (k, &v)| if v > rel[best] { k } else { best });
    let rest: f64 = rel
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != top)
        .map(|(_, &v)| (v - rel[top]).exp())
        .sum();
    let mut grad = softmax(logits);
    grad[label] -= 1.0;
    Ok((rel[top] + rest.ln_1p(), grad))
}
