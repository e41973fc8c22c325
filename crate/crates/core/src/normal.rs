//! Standard normal distribution function and its inverse.

use libm::erfc;
use statrs::function::erf::erfc_inv;

use crate::error::{Error, Result};

/// `Φ(t)`.
pub fn normal_cdf(t: f64) -> f64 {
    0.5 * erfc(-t / std::f64::consts::SQRT_2)
}

/// `2{1 - Φ(|z|)}`, evaluated through `erfc` so tiny p-values keep their
/// relative precision.
pub fn two_sided_p_value(z: f64) -> f64 {
    erfc(z.abs() / std::f64::consts::SQRT_2).min(1.0)
}

/// `Φ⁻¹(q)` for `q ∈ (0, 1)`.
pub fn normal_quantile(q: f64) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::InvalidInput(format!(
            "normal quantile requires q in (0, 1), got {q}"
        )));
    }
    let mut x = -std::f64::consts::SQRT_2 * erfc_inv(2.0 * q);
    // Newton steps on Φ(x) = q against the accurate cdf.
    for _ in 0..2 {
        let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        if pdf < 1e-300 {
            break;
        }
        x -= (normal_cdf(x) - q) / pdf;
    }
    Ok(x)
}
