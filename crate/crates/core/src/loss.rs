//! Focal and dice losses over per-pixel probabilities.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PROB_CLAMP: f64 = 1e-7;
pub const DICE_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub focal: f64,
    pub dice: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            focal: 0.5,
            dice: 0.5,
            gamma: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.focal < 0.0 || self.dice < 0.0 || self.gamma < 0.0 {
            return Err(Error::Config(format!("negative loss setting in {self:?}")));
        }
        Ok(())
    }
}

fn check_pair(op: &'static str, probs: &Tensor, targets: &Tensor) -> Result<()> {
    if probs.numel() != targets.numel() {
        return Err(Error::shape(
            op,
            format!("probabilities {:?} vs targets {:?}", probs.shape(), targets.shape()),
        ));
    }
    Ok(())
}

/// Mean over pixels of `−(1 − p_t)^γ · ln(p_t)`, where `p_t` is the
/// probability assigned to the true class. Probabilities are clamped to
/// `[1e-7, 1 − 1e-7]`; the gradient is zero where the clamp is active.
pub fn focal_loss(probs: &Tensor, targets: &Tensor, gamma: f64) -> Result<Tensor> {
    check_pair("focal_loss", probs, targets)?;
    let n = probs.numel() as f64;
    let t = targets.to_vec();
    let mut total = 0.0;
    for (&p, &y) in probs.data().iter().zip(&t) {
        let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        let pt = if y > 0.5 { p } else { 1.0 - p };
        total += -(1.0 - pt).powf(gamma) * pt.ln();
    }
    let p_ = probs.clone();
    Tensor::from_op(
        "focal_loss",
        vec![1],
        vec![total / n],
        vec![probs.clone(), targets.clone()],
        Box::new(move |g, _| {
            let gp = p_.data().iter().zip(&t).map(|(&raw, &y)| {
                if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&raw) {
                    return 0.0;
                }
                let pos = y > 0.5;
                let pt = if pos { raw } else { 1.0 - raw };
                let q = 1.0 - pt;
                let growth = if gamma == 0.0 { 0.0 } else { gamma * q.powf(gamma - 1.0) * pt.ln() };
                let d_pt = growth - q.powf(gamma) / pt;
                let d_p = if pos { d_pt } else { -d_pt };
                g[0] * d_p / n
            });
            vec![Some(gp.collect()), None]
        }),
    )
}

/// `1 − (2·Σ p·t + ε) / (Σ p + Σ t + ε)` with `ε = 1e-6`.
pub fn dice_loss(probs: &Tensor, targets: &Tensor) -> Result<Tensor> {
    check_pair("dice_loss", probs, targets)?;
    let t = targets.to_vec();
    let inter: f64 = probs.data().iter().zip(&t).map(|(p, y)| p * y).sum();
    let num = 2.0 * inter + DICE_EPS;
    let den = probs.data().iter().sum::<f64>() + t.iter().sum::<f64>() + DICE_EPS;
    Tensor::from_op(
        "dice_loss",
        vec![1],
        vec![1.0 - num / den],
        vec![probs.clone(), targets.clone()],
        Box::new(move |g, _| {
            let gp = t
                .iter()
                .map(|&y| -g[0] * (2.0 * y * den - num) / (den * den))
                .collect();
            vec![Some(gp), None]
        }),
    )
}

/// Weighted total plus the two components as plain numbers for logging.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub total: Tensor,
    pub focal: f64,
    pub dice: f64,
}

pub fn total_loss(probs: &Tensor, targets: &Tensor, w: &LossWeights) -> Result<LossBreakdown> {
    w.validate()?;
    let focal = focal_loss(probs, targets, w.gamma)?;
    let dice = dice_loss(probs, targets)?;
    let total = focal.scale(w.focal)?.add(&dice.scale(w.dice)?)?;
    Ok(LossBreakdown {
        focal: focal.item()?,
        dice: dice.item()?,
        total,
    })
}
