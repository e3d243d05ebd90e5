//! Control limits for monitoring statistics, estimated from training data
//! by Gaussian kernel density estimation.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::CONSTANT_VAR_TOL;
use crate::error::{Error, Result};

/// A fitted control limit: alarm when a statistic strictly exceeds `value`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlLimit {
    pub value: f64,
    pub alpha: f64,
    /// KDE bandwidth used; zero marks the empirical-quantile fallback for
    /// (near-)constant samples.
    pub bandwidth: f64,
}

fn kde_cdf(samples: &[f64], h: f64, c: f64, normal: &Normal) -> f64 {
    let sum: f64 = samples.iter().map(|&x| normal.cdf((c - x) / h)).sum();
    sum / samples.len() as f64
}

/// Estimates the smallest threshold whose estimated cumulative probability
/// reaches `alpha`, using a Gaussian KDE with Silverman's bandwidth
/// `1.06 * sigma * n^(-1/5)` and bisection to 1e-6 relative precision.
///
/// Samples with (near-)zero variance fall back to the empirical
/// alpha-quantile, recorded with `bandwidth = 0`.
pub fn kde_limit(samples: &[f64], alpha: f64) -> Result<ControlLimit> {
    if samples.len() < 30 {
        return Err(Error::data(format!(
            "need at least 30 training statistics for a control limit, got {}",
            samples.len()
        )));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::data("training statistics must be finite"));
    }
    if !(alpha > 0.5 && alpha < 1.0) {
        return Err(Error::data(format!(
            "confidence level must be in (0.5, 1), got {alpha}"
        )));
    }

    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let sigma = var.sqrt();

    if sigma <= CONSTANT_VAR_TOL * mean.abs().max(1.0) {
        // Degenerate spread: use the empirical quantile directly.
        let mut sorted: Vec<f64> = samples.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        let idx = ((alpha * n).ceil() as usize).clamp(1, sorted.len()) - 1;
        return Ok(ControlLimit {
            value: sorted[idx],
            alpha,
            bandwidth: 0.0,
        });
    }

    let h = 1.06 * sigma * n.powf(-0.2);
    let min = samples.iter().copied().fold(f64::INFINITY, f64::min);
    let max = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");

    let mut lo = min - 3.0 * h;
    let mut hi = max + 3.0 * h;
    // For alpha beyond the mass captured at max + 3h, widen until covered.
    let mut guard = 0;
    while kde_cdf(samples, h, hi, &normal) < alpha {
        hi += h;
        guard += 1;
        if guard > 1000 {
            return Err(Error::numerical("control limit search failed to bracket alpha"));
        }
    }
    let tol = 1e-6 * hi.abs().max(lo.abs()).max(f64::MIN_POSITIVE);
    for _ in 0..200 {
        if hi - lo <= tol {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if kde_cdf(samples, h, mid, &normal) >= alpha {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(ControlLimit {
        value: hi,
        alpha,
        bandwidth: h,
    })
}

/// Applies a limit to a (possibly absent) statistic: alarm on strict excess.
pub fn evaluate(stat: Option<f64>, limit: &ControlLimit) -> Option<bool> {
    stat.map(|s| s > limit.value)
}
