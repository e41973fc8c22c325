//! One-step correction of the penalized exposure coefficient by the
//! decorrelated score, with Wald interval and two-sided p-value.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::family::GlmFamily;
use crate::glm::{Coefficients, Design};
use crate::normal::{normal_quantile, two_sided_p_value};
use crate::projection::ProjectionFit;

/// Partial information at or below this is treated as zero.
pub const MIN_INFORMATION: f64 = 1e-10;

/// Where the score is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// At the full estimate `η̂`.
    #[default]
    AtEstimate,
    /// At `(0, ζ̂)`, i.e. with the exposure term dropped from the predictor.
    AtNull,
}

impl FromStr for ScoreMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "at_estimate" => Ok(ScoreMode::AtEstimate),
            "at_null" => Ok(ScoreMode::AtNull),
            other => Err(Error::InvalidConfig(format!("unknown score mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InferenceResult {
    pub theta_hat: f64,
    pub theta_tilde: f64,
    pub score: f64,
    pub info_partial: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub alpha: f64,
    /// `θ̃ / se`, reported as the effect size.
    pub z: f64,
    pub p_value: f64,
}

impl InferenceResult {
    pub fn ci_length(&self) -> f64 {
        self.ci_high - self.ci_low
    }

    pub fn covers(&self, value: f64) -> bool {
        self.ci_low <= value && value <= self.ci_high
    }
}

/// Interval, z and p-value for an estimate with partial information
/// `info` over `n` observations.
pub fn wald_interval(theta_hat: f64, theta_tilde: f64, score: f64, info: f64, n: usize, alpha: f64) -> Result<InferenceResult> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidInput(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if !(info > MIN_INFORMATION) {
        return Err(Error::DegenerateInformation(info));
    }
    let se = 1.0 / (n as f64 * info).sqrt();
    let half = normal_quantile(1.0 - alpha / 2.0)? * se;
    let z = theta_tilde / se;
    Ok(InferenceResult {
        theta_hat,
        theta_tilde,
        score,
        info_partial: info,
        se,
        ci_low: theta_tilde - half,
        ci_high: theta_tilde + half,
        alpha,
        z,
        p_value: two_sided_p_value(z),
    })
}

pub fn debias(
    family: GlmFamily,
    design: &Design,
    eta_hat: &Coefficients,
    w_fit: &ProjectionFit,
    alpha: f64,
    score_mode: ScoreMode,
) -> Result<InferenceResult> {
    if eta_hat.len() != design.dim() || eta_hat.beta.len() != design.k() {
        return Err(Error::DimensionMismatch(format!(
            "coefficients of length {} do not match design dimension {}",
            eta_hat.len(),
            design.dim()
        )));
    }
    if w_fit.w.len() + 1 != design.dim() {
        return Err(Error::DimensionMismatch(format!(
            "projection vector of length {} does not match {} nuisance columns",
            w_fit.w.len(),
            design.dim() - 1
        )));
    }
    family.check_response(design.y().as_slice())?;
    let z = design.z();
    let n = design.n();
    let eta = eta_hat.to_vector();
    let lp = design.linear_predictor(&eta);
    let nuisance = z.columns(1, design.dim() - 1);
    let projected = nuisance * &w_fit.w;

    let mut score = 0.0;
    let mut info = 0.0;
    for i in 0..n {
        let d = z[(i, 0)];
        let resid_d = d - projected[i];
        let t = match score_mode {
            ScoreMode::AtEstimate => lp[i],
            ScoreMode::AtNull => lp[i] - eta_hat.theta * d,
        };
        score -= (design.y()[i] - family.mean(t)) * resid_d;
        info += family.variance(lp[i]) * d * resid_d;
    }
    score /= n as f64;
    info /= n as f64;
    if !info.is_finite() || !score.is_finite() {
        return Err(Error::InvalidState("non-finite score or information".into()));
    }
    if info <= MIN_INFORMATION {
        return Err(Error::DegenerateInformation(info));
    }
    let theta_tilde = eta_hat.theta - score / info;
    wald_interval(eta_hat.theta, theta_tilde, score, info, n, alpha)
}
