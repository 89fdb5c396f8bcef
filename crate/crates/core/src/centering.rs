//! Reward centering: an online estimate of the average reward that is
//! subtracted from every observed reward.

use serde::{Deserialize, Serialize};

use crate::error::CenteringError;

pub const DEFAULT_BETA: f64 = 2e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AverageTracker {
    pub mean: f64,
    pub beta: f64,
}

impl Default for AverageTracker {
    fn default() -> Self {
        AverageTracker::new(DEFAULT_BETA)
    }
}

impl AverageTracker {
    pub fn new(beta: f64) -> AverageTracker {
        AverageTracker { mean: 0.0, beta }
    }

    /// Moves the estimate a fraction `beta` toward `r` and returns it.
    pub fn update(&mut self, r: f64) -> Result<f64, CenteringError> {
        if !r.is_finite() {
            return Err(CenteringError::NonFiniteReward(r));
        }
        self.mean += self.beta * (r - self.mean);
        Ok(self.mean)
    }
}

/// Differential TD error `(r - r_bar) + v_next - v_curr`; pass `v_next = 0`
/// on terminal steps.
pub fn centered_delta(r: f64, r_bar: f64, v_next: f64, v_curr: f64) -> f64 {
    (r - r_bar) + v_next - v_curr
}
