//! Exponential families with canonical link and unit dispersion.
//!
//! Each family is described by its cumulant `b`, mean function `b'` and
//! variance function `b''`. The response density is
//! `exp{y t - b(t) + c(y)}` with `t` the linear predictor.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear predictors above this value are clamped in the Poisson cumulant.
pub const POISSON_ETA_MAX: f64 = 30.0;

static POISSON_CLAMP_WARNED: AtomicBool = AtomicBool::new(false);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GlmFamily {
    Linear,
    Logistic,
    Poisson,
}

#[inline]
fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn poisson_arg(t: f64) -> f64 {
    if t > POISSON_ETA_MAX {
        if !POISSON_CLAMP_WARNED.swap(true, Ordering::Relaxed) {
            log::warn!(
                "poisson linear predictor {t:.3} exceeds {POISSON_ETA_MAX}; clamping inside b, b', b''"
            );
        }
        POISSON_ETA_MAX
    } else {
        t
    }
}

impl GlmFamily {
    pub fn name(self) -> &'static str {
        match self {
            GlmFamily::Linear => "linear",
            GlmFamily::Logistic => "logistic",
            GlmFamily::Poisson => "poisson",
        }
    }

    /// `b(t)`.
    #[inline]
    pub fn cumulant(self, t: f64) -> f64 {
        match self {
            GlmFamily::Linear => 0.5 * t * t,
            GlmFamily::Logistic => t.max(0.0) + (-t.abs()).exp().ln_1p(),
            GlmFamily::Poisson => poisson_arg(t).exp(),
        }
    }

    /// `b'(t)`, the mean function.
    #[inline]
    pub fn mean(self, t: f64) -> f64 {
        match self {
            GlmFamily::Linear => t,
            GlmFamily::Logistic => sigmoid(t),
            GlmFamily::Poisson => poisson_arg(t).exp(),
        }
    }

    /// `b''(t)`, the variance function.
    #[inline]
    pub fn variance(self, t: f64) -> f64 {
        match self {
            GlmFamily::Linear => 1.0,
            GlmFamily::Logistic => {
                let e = (-t.abs()).exp();
                e / ((1.0 + e) * (1.0 + e))
            }
            GlmFamily::Poisson => poisson_arg(t).exp(),
        }
    }

    /// `(b, b', b'')` at `t`, rejecting non-finite arguments.
    pub fn cumulant_triple(self, t: f64) -> Result<(f64, f64, f64)> {
        if !t.is_finite() {
            return Err(Error::InvalidInput(format!(
                "linear predictor must be finite, got {t}"
            )));
        }
        Ok((self.cumulant(t), self.mean(t), self.variance(t)))
    }

    /// Unit deviance `2{l(y; y) - l(y; t)}` of one observation.
    #[inline]
    pub fn unit_deviance(self, y: f64, t: f64) -> f64 {
        match self {
            GlmFamily::Linear => (y - t) * (y - t),
            // saturated log-likelihood is zero for a binary response
            GlmFamily::Logistic => 2.0 * (self.cumulant(t) - y * t),
            GlmFamily::Poisson => {
                let mu = self.mean(t);
                let a = poisson_arg(t);
                let ylogy = if y > 0.0 { y * (y.ln() - a) } else { 0.0 };
                2.0 * (ylogy - (y - mu))
            }
        }
    }

    pub fn check_response(self, y: &[f64]) -> Result<()> {
        for (i, &v) in y.iter().enumerate() {
            let ok = match self {
                GlmFamily::Linear => v.is_finite(),
                GlmFamily::Logistic => v == 0.0 || v == 1.0,
                GlmFamily::Poisson => v.is_finite() && v >= 0.0 && v.fract() == 0.0,
            };
            if !ok {
                let expected = match self {
                    GlmFamily::Linear => "a finite real value",
                    GlmFamily::Logistic => "0 or 1",
                    GlmFamily::Poisson => "a non-negative integer",
                };
                return Err(Error::InvalidResponse {
                    family: self.name(),
                    detail: format!("y[{i}] = {v}, expected {expected}"),
                });
            }
        }
        Ok(())
    }
}

impl fmt::Display for GlmFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GlmFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "linear" | "gaussian" => Ok(GlmFamily::Linear),
            "logistic" | "binomial" => Ok(GlmFamily::Logistic),
            "poisson" => Ok(GlmFamily::Poisson),
            other => Err(Error::InvalidInput(format!(
                "unknown family '{other}' (expected linear, logistic or poisson)"
            ))),
        }
    }
}
