//! PID feedback control of the Lagrange multiplier.
//!
//! The controller measures the episodic cost `J_C`, compares it with the limit `d` and
//! produces a nonnegative multiplier:
//!
//! ```text
//! e  = J_C - d
//! I  = max(I + e, 0)
//! D  = max(J_C - J_C_prev, 0)
//! λ  = max(Kp·e + Ki·I + Kd·D, 0)
//! ```
//!
//! The integral is clamped at zero so that running below the limit cannot build up
//! negative credit, and the derivative only reacts to rising cost.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PidGains {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
}

impl Default for PidGains {
    fn default() -> Self {
        PidGains { kp: 2.0, ki: 1.0, kd: 1.0 }
    }
}

impl PidGains {
    pub fn new(kp: f64, ki: f64, kd: f64) -> Result<Self> {
        let g = PidGains { kp, ki, kd };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, k) in [("kp", self.kp), ("ki", self.ki), ("kd", self.kd)] {
            if !(k.is_finite() && k >= 0.0) {
                return Err(Error::config(format!("pid.{name}"), "must be finite and nonnegative"));
            }
        }
        if self.kp == 0.0 && self.ki == 0.0 && self.kd == 0.0 {
            return Err(Error::config("pid", "gains must not all be zero"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PidState {
    pub gains: PidGains,
    /// Cost limit `d`; may be `+inf` for an unconstrained run.
    pub cost_limit: f64,
    pub integral: f64,
    pub prev_cost: f64,
    pub lambda: f64,
    /// Applies `Kp` and `Kd` a second time to their already-scaled terms, reproducing the
    /// printed form of the update rule.
    pub double_gain: bool,
}

impl PidState {
    pub fn new(gains: PidGains, cost_limit: f64) -> Result<Self> {
        gains.validate()?;
        if cost_limit.is_nan() || cost_limit < 0.0 {
            return Err(Error::config("cost_limit", "must be nonnegative"));
        }
        Ok(PidState {
            gains,
            cost_limit,
            integral: 0.0,
            prev_cost: 0.0,
            lambda: 0.0,
            double_gain: false,
        })
    }

    pub fn with_double_gain(mut self, on: bool) -> Self {
        self.double_gain = on;
        self
    }

    /// Feeds one cost measurement and returns the new multiplier.
    pub fn update(&mut self, cost: f64) -> f64 {
        let g = self.gains;
        let error = cost - self.cost_limit;
        self.integral = (self.integral + error).max(0.0);
        let rise = (cost - self.prev_cost).max(0.0);

        // An infinite limit gives error = -inf; a zero gain must not turn that into NaN.
        let scaled = |k: f64, x: f64| if k == 0.0 { 0.0 } else { k * x };
        let (p, d) = if self.double_gain {
            (scaled(g.kp * g.kp, error), scaled(g.kd * g.kd, rise))
        } else {
            (scaled(g.kp, error), scaled(g.kd, rise))
        };
        let out = p + scaled(g.ki, self.integral) + d;
        self.lambda = if out > 0.0 { out } else { 0.0 };
        self.prev_cost = cost;
        self.lambda
    }
}

pub fn pid_init(gains: PidGains, cost_limit: f64) -> Result<PidState> {
    PidState::new(gains, cost_limit)
}

/// Functional form of [`PidState::update`].
pub fn pid_update(state: &PidState, cost: f64) -> (PidState, f64) {
    let mut next = *state;
    let lambda = next.update(cost);
    (next, lambda)
}
