//! Gradient reversal.
//!
//! The plain reversal layer is the identity on the forward pass and multiplies
//! the upstream gradient by `-lambda` on the way back. The adversarial variant
//! picks `lambda` from the domain classifier's current loss: when the loss is
//! below the hardness threshold the example is easy to tell apart by domain,
//! so its reversed gradient is amplified by `lambda0 / loss`, capped at the
//! overflow threshold.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdvGrlConfig {
    pub lambda0: f64,
    /// Hardness threshold on the classifier loss.
    pub alpha: f64,
    /// Overflow threshold; upper bound on the reversal weight.
    pub beta: f64,
}

impl Default for AdvGrlConfig {
    fn default() -> Self {
        Self {
            lambda0: 1.0,
            alpha: 0.63,
            beta: 30.0,
        }
    }
}

impl AdvGrlConfig {
    pub fn validate(&self) -> Result<()> {
        // alpha = 0 is allowed: it forces the constant branch, i.e. the plain GRL.
        if !(self.lambda0 > 0.0) || !(self.alpha >= 0.0) || !(self.beta >= self.lambda0) {
            return Err(Error::Input(format!(
                "advgrl needs lambda0 > 0, alpha >= 0, beta >= lambda0 (got {self:?})"
            )));
        }
        Ok(())
    }
}

/// How the reversal weight of a branch is chosen.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Reversal {
    /// Fixed weight.
    Constant(f64),
    /// Weight chosen per step from the branch classifier's loss.
    Adversarial(AdvGrlConfig),
}

impl Reversal {
    /// Reversal weight given the detached classifier loss of the current batch.
    pub fn lambda(&self, classifier_loss: f64) -> f64 {
        match *self {
            Reversal::Constant(lambda) => lambda,
            Reversal::Adversarial(cfg) => advgrl_lambda(classifier_loss, &cfg),
        }
    }
}

pub fn grl_forward(v: &[f64]) -> Vec<f64> {
    v.to_vec()
}

pub fn grl_backward(upstream: &[f64], lambda: f64) -> Vec<f64> {
    upstream.iter().map(|g| -lambda * g).collect()
}

/// Hardness-aware reversal weight.
///
/// `classifier_loss` is treated as a constant; nothing differentiates through
/// it. A loss of exactly zero yields `beta`, the limit of the clamp.
pub fn advgrl_lambda(classifier_loss: f64, cfg: &AdvGrlConfig) -> f64 {
    if classifier_loss < cfg.alpha {
        if classifier_loss <= 0.0 {
            return cfg.beta;
        }
        (cfg.lambda0 / classifier_loss).min(cfg.beta)
    } else {
        cfg.lambda0
    }
}

pub fn advgrl_backward(upstream: &[f64], classifier_loss: f64, cfg: &AdvGrlConfig) -> Vec<f64> {
    grl_backward(upstream, advgrl_lambda(classifier_loss, cfg))
}
