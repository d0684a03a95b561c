//! Denoising losses: truncated cross-entropy, which zeroes the largest-loss
//! positives under a growing drop rate, and reweighted cross-entropy, which
//! scales every example by its own prediction confidence.
//!
//! Both are expressed as per-example weights on the plain cross-entropy, so
//! [`crate::model::Model::backward`] needs no knowledge of the strategy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::PRED_CLAMP;

/// Binary cross-entropy of a probability against a 0/1 label.
pub fn ce_loss(y_hat: f64, y_bar: f64) -> f64 {
    let p = y_hat.clamp(PRED_CLAMP, 1.0 - PRED_CLAMP);
    -(y_bar * p.ln() + (1.0 - y_bar) * (1.0 - p).ln())
}

/// Linear drop-rate schedule `eps(T) = min(alpha * T, epsilon_max)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropRateSchedule {
    pub alpha: f64,
    pub epsilon_max: f64,
}

impl DropRateSchedule {
    pub fn new(alpha: f64, epsilon_max: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!("alpha must be positive, got {alpha}")));
        }
        if !(0.0..1.0).contains(&epsilon_max) {
            return Err(Error::InvalidArgument(format!(
                "epsilon_max must lie in [0, 1), got {epsilon_max}"
            )));
        }
        Ok(DropRateSchedule { alpha, epsilon_max })
    }

    /// Schedule that reaches `epsilon_max` after `epsilon_n` iterations.
    pub fn from_epsilon_n(epsilon_max: f64, epsilon_n: u64) -> Result<Self> {
        if epsilon_n == 0 {
            return Err(Error::InvalidArgument("epsilon_n must be positive".into()));
        }
        let alpha = if epsilon_max > 0.0 {
            epsilon_max / epsilon_n as f64
        } else {
            1.0 / epsilon_n as f64
        };
        DropRateSchedule::new(alpha, epsilon_max)
    }

    /// Iterations needed to reach the bound.
    pub fn epsilon_n(&self) -> f64 {
        self.epsilon_max / self.alpha
    }

    pub fn drop_rate(&self, iteration: u64) -> f64 {
        (self.alpha * iteration as f64).min(self.epsilon_max)
    }
}

/// Indices of the `min(floor(eps * total_batch_size), n)` largest losses, in
/// ascending index order. Ties go to the lower index.
pub fn select_truncated(pos_losses: &[f64], total_batch_size: usize, epsilon: f64) -> Vec<usize> {
    debug_assert!(total_batch_size >= pos_losses.len());
    // The nudge keeps e.g. 0.29 * 100 from flooring to 28.
    let k = ((epsilon * total_batch_size as f64 + 1e-9).floor().max(0.0) as usize).min(pos_losses.len());
    if k == 0 {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..pos_losses.len()).collect();
    order.sort_by(|&a, &b| pos_losses[b].total_cmp(&pos_losses[a]).then(a.cmp(&b)));
    let mut chosen = order[..k].to_vec();
    chosen.sort_unstable();
    chosen
}

/// `yhat^beta` for positives, `(1 - yhat)^beta` for negatives.
pub fn rce_weight(y_hat: f64, y_bar: f64, beta: f64) -> f64 {
    if y_bar >= 0.5 {
        y_hat.powf(beta)
    } else {
        (1.0 - y_hat).powf(beta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "kebab-case")]
pub enum LossStrategy {
    Ce,
    TruncatedCe(DropRateSchedule),
    ReweightedCe { beta: f64 },
}

impl LossStrategy {
    pub fn truncated(epsilon_max: f64, epsilon_n: u64) -> Result<Self> {
        Ok(LossStrategy::TruncatedCe(DropRateSchedule::from_epsilon_n(epsilon_max, epsilon_n)?))
    }

    pub fn reweighted(beta: f64) -> Result<Self> {
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(Error::InvalidArgument(format!("beta must be non-negative, got {beta}")));
        }
        Ok(LossStrategy::ReweightedCe { beta })
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossStrategy::Ce => "CE",
            LossStrategy::TruncatedCe(_) => "T-CE",
            LossStrategy::ReweightedCe { .. } => "R-CE",
        }
    }

    /// Drop rate in effect at `iteration` (0 unless truncating).
    pub fn drop_rate(&self, iteration: u64) -> f64 {
        match self {
            LossStrategy::TruncatedCe(s) => s.drop_rate(iteration),
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchWeights {
    pub weights: Vec<f64>,
    /// Batch indices zeroed by truncation.
    pub dropped: Vec<usize>,
}

/// Per-example weights that turn plain cross-entropy into the chosen loss.
/// `iteration` is the number of optimizer steps already taken.
pub fn batch_weights(strategy: &LossStrategy, preds: &[f64], labels: &[f64], iteration: u64) -> BatchWeights {
    debug_assert_eq!(preds.len(), labels.len());
    let mut weights = vec![1.0; preds.len()];
    let mut dropped = Vec::new();
    match strategy {
        LossStrategy::Ce => {}
        LossStrategy::TruncatedCe(schedule) => {
            let positives: Vec<usize> = (0..labels.len()).filter(|&k| labels[k] >= 0.5).collect();
            let losses: Vec<f64> = positives.iter().map(|&k| ce_loss(preds[k], 1.0)).collect();
            for j in select_truncated(&losses, preds.len(), schedule.drop_rate(iteration)) {
                let k = positives[j];
                weights[k] = 0.0;
                dropped.push(k);
            }
        }
        LossStrategy::ReweightedCe { beta } => {
            for ((w, &p), &y) in weights.iter_mut().zip(preds).zip(labels) {
                *w = rce_weight(p, y, *beta);
            }
        }
    }
    BatchWeights { weights, dropped }
}
