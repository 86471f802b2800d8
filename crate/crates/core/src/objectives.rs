//! Training objectives on next-token probabilities.
//!
//! All three objectives are functions of `p`, the probability the model
//! assigns to the observed token:
//!
//! * Cross-entropy: `-ln p`.
//! * Generalized cross-entropy `GCE(q)`: `(1 - p^q) / q` for `q` in `(0, 1]`.
//!   Interpolates between cross-entropy (`q -> 0`) and the bounded,
//!   outlier-tolerant mean absolute error (`q = 1`, where the loss is
//!   `1 - p`).
//! * Partially-Huberised cross-entropy `PhuberCE(tau)` for `tau > 1`:
//!   `-ln p` where `p > 1/tau`, and the linearization `1 + ln(tau) - tau*p`
//!   below. The two branches meet at `p = 1/tau` with value `ln(tau)`, and
//!   the slope never exceeds `tau` in magnitude — a built-in gradient clip
//!   that keeps confidently-wrong samples from dominating updates.
//!
//! A sequence objective is the *mean* of the token losses over the response
//! span (the end-of-response marker included), so for cross-entropy the
//! sequence loss equals the log-perplexity of the response.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tinylm::TokenDist;

#[derive(Debug, Error, PartialEq)]
pub enum ObjectiveError {
    #[error("invalid objective parameter: {0}")]
    InvalidParameter(String),
    #[error("token probability {p} outside [0, 1]")]
    InvalidProbability { p: f64 },
    #[error("infinite loss: token probability is exactly 0 under {objective}")]
    InfiniteLoss { objective: &'static str },
    #[error("distribution has {rows} rows but {targets} target tokens")]
    LengthMismatch { rows: usize, targets: usize },
}

/// A token-level training objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Objective {
    Ce,
    Gce { q: f64 },
    PhuberCe { tau: f64 },
}

/// Default hyperparameter grids recorded for experiment configs.
pub const GCE_Q_GRID: [f64; 4] = [0.3, 0.5, 0.7, 1.0];
pub const PHUBER_TAU_GRID: [f64; 3] = [2.0, 5.0, 10.0];

impl Objective {
    /// Validates hyperparameters: `q` in `(0, 1]`, `tau > 1`.
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        match *self {
            Objective::Ce => Ok(()),
            Objective::Gce { q } => {
                if q > 0.0 && q <= 1.0 {
                    Ok(())
                } else {
                    Err(ObjectiveError::InvalidParameter(format!(
                        "GCE q must lie in (0, 1], got {q}"
                    )))
                }
            }
            Objective::PhuberCe { tau } => {
                if tau > 1.0 {
                    Ok(())
                } else {
                    Err(ObjectiveError::InvalidParameter(format!(
                        "PhuberCE tau must exceed 1, got {tau}"
                    )))
                }
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Objective::Ce => "ce",
            Objective::Gce { .. } => "gce",
            Objective::PhuberCe { .. } => "phuber_ce",
        }
    }

    /// Loss of one token given the probability assigned to it.
    pub fn token_loss(&self, p: f64) -> Result<f64, ObjectiveError> {
        if !(0.0..=1.0).contains(&p) {
            return Err(ObjectiveError::InvalidProbability { p });
        }
        self.validate()?;
        match *self {
            Objective::Ce => {
                if p == 0.0 {
                    Err(ObjectiveError::InfiniteLoss { objective: "ce" })
                } else {
                    Ok(-p.ln())
                }
            }
            Objective::Gce { q } => {
                if p == 0.0 {
                    // p^q -> 0 gives the finite value 1/q, but the *limit
                    // into* p=0 of the gradient diverges for q < 1; flag it
                    // like CE rather than silently returning a value that the
                    // optimizer could never have produced a step for.
                    Err(ObjectiveError::InfiniteLoss { objective: "gce" })
                } else {
                    Ok((1.0 - p.powf(q)) / q)
                }
            }
            Objective::PhuberCe { tau } => {
                if p > 1.0 / tau {
                    Ok(-p.ln())
                } else {
                    Ok(1.0 + tau.ln() - tau * p)
                }
            }
        }
    }

    /// Derivative of [`Objective::token_loss`] with respect to `p`. Used by
    /// backpropagation; finite for PhuberCE everywhere, and for CE/GCE
    /// wherever the loss itself is finite.
    pub fn dloss_dp(&self, p: f64) -> f64 {
        match *self {
            Objective::Ce => -1.0 / p,
            Objective::Gce { q } => -p.powf(q - 1.0),
            Objective::PhuberCe { tau } => {
                if p > 1.0 / tau {
                    -1.0 / p
                } else {
                    -tau
                }
            }
        }
    }

    /// Mean token loss over a response: the distribution rows are the
    /// response slots and `targets[i]` is the observed token at slot `i`.
    pub fn sequence_objective(
        &self,
        dist: &TokenDist,
        targets: &[u16],
    ) -> Result<f64, ObjectiveError> {
        if dist.probs.len() != targets.len() {
            return Err(ObjectiveError::LengthMismatch {
                rows: dist.probs.len(),
                targets: targets.len(),
            });
        }
        if targets.is_empty() {
            return Err(ObjectiveError::LengthMismatch { rows: 0, targets: 0 });
        }
        let mut total = 0.0;
        for (row, &t) in dist.probs.iter().zip(targets) {
            total += self.token_loss(row[t as usize])?;
        }
        Ok(total / targets.len() as f64)
    }
}
