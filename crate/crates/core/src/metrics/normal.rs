use libm::erfc;
use statrs::function::erf::erfc_inv;

use crate::error::{invalid, Result};

/// Standard normal CDF, evaluated through the musl `erfc` (under 1 ulp)
/// so the lower tail keeps full relative precision.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Standard normal quantile for `0 < p < 1`.
///
/// Starts from `erfc_inv` and takes Newton steps against [`normal_cdf`]
/// so that `normal_cdf(normal_cdf_inv(p))` reproduces `p` to ~1 ulp in the
/// bulk.
pub fn normal_cdf_inv(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(invalid("p", format!("quantile needs 0 < p < 1, got {p}")));
    }
    let mut x = -std::f64::consts::SQRT_2 * erfc_inv(2.0 * p);
    for _ in 0..2 {
        let d = normal_pdf(x);
        if !(d > 0.0) {
            break;
        }
        let step = (normal_cdf(x) - p) / d;
        if !step.is_finite() {
            break;
        }
        x -= step;
    }
    Ok(x)
}
