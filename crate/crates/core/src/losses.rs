//! Focal and asymmetric losses on per-class sigmoid probabilities.
//!
//! Every loss reports its gradient with respect to the input probabilities,
//! so callers chain through `p(1-p)` themselves when they hold logits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Clamp applied to probabilities before any logarithm.
pub const PROB_EPS: f64 = 1e-7;

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalConfig {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalConfig {
    fn default() -> Self {
        FocalConfig { alpha: 0.25, gamma: 2.0 }
    }
}

impl FocalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) || !self.gamma.is_finite() || self.gamma < 0.0 {
            return Err(Error::Config(format!("invalid focal config {:?}", self)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AslConfig {
    pub gamma_pos: f64,
    pub gamma_neg: f64,
    pub clip_m: f64,
}

impl Default for AslConfig {
    fn default() -> Self {
        AslConfig { gamma_pos: 0.0, gamma_neg: 4.0, clip_m: 0.05 }
    }
}

impl AslConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.gamma_pos.is_finite()
            && self.gamma_neg.is_finite()
            && self.gamma_pos >= 0.0
            && self.gamma_neg >= 0.0
            && (0.0..1.0).contains(&self.clip_m);
        if !ok {
            return Err(Error::Config(format!("invalid asymmetric loss config {:?}", self)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossAndGrad {
    pub value: f64,
    pub grad: Vec<f64>,
}

fn check_open_unit(p: f64) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("probability {p} outside (0, 1)")))
    }
}

/// `x^e` with the convention that the focusing weight is exactly 1 when `e == 0`.
fn focus(x: f64, e: f64) -> f64 {
    if e == 0.0 {
        1.0
    } else {
        x.powf(e)
    }
}

/// Derivative of `x^e`; zero when `e == 0`.
fn focus_prime(x: f64, e: f64) -> f64 {
    if e == 0.0 {
        0.0
    } else {
        e * x.powf(e - 1.0)
    }
}

/// Binary focal loss on a single probability. The gradient is `d value / d p`.
pub fn binary_focal(p: f64, target: bool, cfg: &FocalConfig) -> Result<LossAndGrad> {
    check_open_unit(p)?;
    let (a, g) = (cfg.alpha, cfg.gamma);
    let (value, grad) = if target {
        let nll = -p.ln();
        let w = focus(1.0 - p, g);
        (a * w * nll, a * (-focus_prime(1.0 - p, g) * nll - w / p))
    } else {
        let nll = -(1.0 - p).ln();
        let w = focus(p, g);
        ((1.0 - a) * w * nll, (1.0 - a) * (focus_prime(p, g) * nll + w / (1.0 - p)))
    };
    Ok(LossAndGrad { value, grad: vec![grad] })
}

/// Classification term of the group matching cost: focal loss at target 1.
pub fn class_match_cost(p: f64, cfg: &FocalConfig) -> Result<f64> {
    Ok(binary_focal(p, true, cfg)?.value)
}

/// Classification term of the standard matching cost over per-class sigmoid scores.
pub fn multiclass_focal_cost(probs: &[f64], target_class: usize, cfg: &FocalConfig) -> Result<f64> {
    let p = *probs.get(target_class).ok_or(Error::Index { index: target_class, len: probs.len() })?;
    class_match_cost(p, cfg)
}

/// Multi-label asymmetric loss scaled by `mu_asl`. Positives are focused by
/// `gamma_pos`; negatives are shifted down by `clip_m` and focused by `gamma_neg`.
pub fn asymmetric_loss(scores: &[f64], targets: &[bool], cfg: &AslConfig, mu_asl: f64) -> Result<LossAndGrad> {
    if scores.len() != targets.len() {
        return Err(Error::Shape(format!("{} scores against {} targets", scores.len(), targets.len())));
    }
    let mut value = 0.0;
    let mut grad = vec![0.0; scores.len()];
    for (i, (&s, &t)) in scores.iter().zip(targets).enumerate() {
        check_open_unit(s)?;
        if t {
            let nll = -s.ln();
            let w = focus(1.0 - s, cfg.gamma_pos);
            value += w * nll;
            grad[i] = -focus_prime(1.0 - s, cfg.gamma_pos) * nll - w / s;
        } else {
            let shifted = (s - cfg.clip_m).max(0.0);
            if shifted > 0.0 {
                let nll = -(1.0 - shifted).ln();
                let w = focus(shifted, cfg.gamma_neg);
                value += w * nll;
                grad[i] = focus_prime(shifted, cfg.gamma_neg) * nll + w / (1.0 - shifted);
            }
        }
    }
    for g in &mut grad {
        *g *= mu_asl;
    }
    Ok(LossAndGrad { value: mu_asl * value, grad })
}
