//! Segmentation losses and the Dice overlap score.

use serde::{Deserialize, Serialize};

use crate::volume::{Volume, VolumeError};

pub const DICE_SMOOTH: f64 = 1.0;
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub cross_entropy: f64,
    pub dice: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            cross_entropy: 0.3,
            dice: 0.7,
        }
    }
}

struct Sums {
    intersection: f64,
    pred: f64,
    label: f64,
}

fn sums(p: &[f64], y: &[f64]) -> Sums {
    let mut s = Sums {
        intersection: 0.0,
        pred: 0.0,
        label: 0.0,
    };
    for (&pi, &yi) in p.iter().zip(y) {
        s.intersection += pi * yi;
        s.pred += pi;
        s.label += yi;
    }
    s
}

fn dice_from(s: &Sums) -> f64 {
    1.0 - (2.0 * s.intersection + DICE_SMOOTH) / (s.pred + s.label + DICE_SMOOTH)
}

fn bce_mean(p: &[f64], y: &[f64]) -> f64 {
    let total: f64 = p
        .iter()
        .zip(y)
        .map(|(&pi, &yi)| {
            let q = pi.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            -(yi * q.ln() + (1.0 - yi) * (1.0 - q).ln())
        })
        .sum();
    total / p.len() as f64
}

/// `w_ce * mean BCE + w_dice * soft Dice` over flat probability/label arrays.
pub(crate) fn composite(p: &[f64], y: &[f64], w: LossWeights) -> f64 {
    w.cross_entropy * bce_mean(p, y) + w.dice * dice_from(&sums(p, y))
}

/// Loss and its gradient with respect to the pre-sigmoid logits.
pub(crate) fn composite_with_logit_grad(p: &[f64], y: &[f64], w: LossWeights) -> (f64, Vec<f64>) {
    let s = sums(p, y);
    let n = p.len() as f64;
    let denom = s.pred + s.label + DICE_SMOOTH;
    let numer = 2.0 * s.intersection + DICE_SMOOTH;
    let loss = w.cross_entropy * bce_mean(p, y) + w.dice * dice_from(&s);
    let grad = p
        .iter()
        .zip(y)
        .map(|(&pi, &yi)| {
            let sig_grad = pi * (1.0 - pi);
            // clamped probabilities carry no cross-entropy gradient
            let ce = if (PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&pi) {
                (pi - yi) / n
            } else {
                0.0
            };
            let dice_dp = -(2.0 * yi * denom - numer) / (denom * denom);
            w.cross_entropy * ce + w.dice * dice_dp * sig_grad
        })
        .collect();
    (loss, grad)
}

fn as_f64(v: &Volume) -> Vec<f64> {
    v.data().iter().map(|&x| f64::from(x)).collect()
}

/// `1 - (2 sum(p y) + 1) / (sum p + sum y + 1)`.
pub fn soft_dice_loss(p: &Volume, y: &Volume) -> Result<f64, VolumeError> {
    p.check_same_dims(y)?;
    Ok(dice_from(&sums(&as_f64(p), &as_f64(y))))
}

pub fn binary_cross_entropy(p: &Volume, y: &Volume) -> Result<f64, VolumeError> {
    p.check_same_dims(y)?;
    Ok(bce_mean(&as_f64(p), &as_f64(y)))
}

pub fn composite_loss(p: &Volume, y: &Volume, w: LossWeights) -> Result<f64, VolumeError> {
    p.check_same_dims(y)?;
    Ok(composite(&as_f64(p), &as_f64(y), w))
}

/// `2 |p ∩ y| / (|p| + |y|)` on binary volumes; 1 when both are empty.
pub fn dice_score(p_bin: &Volume, y: &Volume) -> Result<f64, VolumeError> {
    p_bin.check_same_dims(y)?;
    let (mut inter, mut np, mut ny) = (0usize, 0usize, 0usize);
    for (&a, &b) in p_bin.data().iter().zip(y.data()) {
        let (a, b) = (a > 0.5, b > 0.5);
        inter += usize::from(a && b);
        np += usize::from(a);
        ny += usize::from(b);
    }
    if np + ny == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (np + ny) as f64)
}
