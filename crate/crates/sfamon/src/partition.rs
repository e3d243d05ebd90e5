//! Iterative variable subset partition.
//!
//! Repeatedly extracts the support of the first sparse loading from the
//! remaining variables, fits a dense slow feature model on that candidate
//! subset, and compares its per-sample slowness vector against the
//! previously accepted subset with a paired Wilcoxon signed-rank test. The
//! first candidate is accepted unconditionally; the loop stops at the first
//! rejection (or when fewer than two variables remain) and the leftovers
//! form the nonlinear remainder.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{sample_cov, StandardizedMatrix};
use crate::error::{Error, Result};
use crate::sfa::{fit_sfa, ridged};
use crate::ssfa::{first_sparse_loading, SsfaConfig};

/// One partition decision: which variables were proposed, the test p-value
/// (absent for the unconditionally accepted first subset), and the outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TestRecord {
    pub variables: Vec<usize>,
    pub p_value: Option<f64>,
    pub accepted: bool,
}

/// Result of the partition: accepted subsets in extraction order, the
/// remainder, and the decision trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SubsetPartition {
    pub sdl: Vec<Vec<usize>>,
    pub sdnl: Vec<usize>,
    pub test_trace: Vec<TestRecord>,
}

/// Per-sample slowness of a feature set: entry n compares the whitened
/// temporal row n against the whitened static row n + 1 (the pair that
/// difference belongs to).
pub fn slowness_vector(s: &DMatrix<f64>, sdot: &DMatrix<f64>) -> Result<DVector<f64>> {
    let n = s.nrows();
    let m = s.ncols();
    if sdot.ncols() != m || sdot.nrows() + 1 != n {
        return Err(Error::data(format!(
            "temporal features are {}x{}, expected {}x{}",
            sdot.nrows(),
            sdot.ncols(),
            n - 1,
            m
        )));
    }
    if n < 4 {
        return Err(Error::data("need at least 4 samples for a slowness vector"));
    }
    if sdot.iter().all(|&v| v == 0.0) {
        return Ok(DVector::zeros(n - 1));
    }

    let xi = ridged(sample_cov(s));
    let xi_dot = ridged(sample_cov(sdot));
    let chol_static = xi
        .clone()
        .cholesky()
        .ok_or_else(|| Error::numerical("static feature covariance is singular"))?;
    let chol_temporal = xi_dot
        .clone()
        .cholesky()
        .or_else(|| {
            (xi_dot + DMatrix::identity(m, m) * 1e-12).cholesky()
        })
        .ok_or_else(|| Error::numerical("temporal feature covariance is singular"))?;

    let mut out = DVector::zeros(n - 1);
    for r in 0..n - 1 {
        let d = sdot.row(r).transpose();
        let num = d.dot(&chol_temporal.solve(&d));
        let sv = s.row(r + 1).transpose();
        // Guard against a vanishing static row; the expected denominator is
        // around m for whitened features.
        let den = sv.dot(&chol_static.solve(&sv)).max(1e-12 * m as f64);
        out[r] = num / den;
    }
    Ok(out)
}

/// Two-sided Wilcoxon signed-rank test on paired vectors.
///
/// Zero differences are dropped and tied absolute differences get averaged
/// ranks. The null distribution is enumerated exactly (over sign patterns)
/// up to 25 effective pairs; beyond that a normal approximation with
/// continuity and tie corrections is used. Returns the p-value and whether
/// the samples are judged to share their slowness level (`p >= alpha`).
pub fn signed_rank_test(a: &DVector<f64>, b: &DVector<f64>, alpha: f64) -> Result<(f64, bool)> {
    if a.len() != b.len() {
        return Err(Error::data(format!(
            "paired vectors differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 5 {
        return Err(Error::data("need at least 5 pairs for the signed-rank test"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::data(format!("alpha must be in (0, 1), got {alpha}")));
    }

    let mut diffs: Vec<f64> = a
        .iter()
        .zip(b.iter())
        .map(|(&x, &y)| x - y)
        .filter(|d| *d != 0.0)
        .collect();
    if diffs.is_empty() {
        return Ok((1.0, true));
    }
    for d in &diffs {
        if !d.is_finite() {
            return Err(Error::data("differences must be finite"));
        }
    }

    // Ranks of |d|, averaging ties; kept doubled so they stay integers.
    diffs.sort_by(|x, y| x.abs().partial_cmp(&y.abs()).expect("finite"));
    let n = diffs.len();
    let mut doubled_ranks = vec![0u64; n];
    let mut tie_correction = 0.0;
    let mut i = 0;
    while i < n {
        let mut jdx = i;
        while jdx + 1 < n && diffs[jdx + 1].abs() == diffs[i].abs() {
            jdx += 1;
        }
        let t = (jdx - i + 1) as f64;
        // Average of positions i+1 ..= jdx+1, doubled: (i+1 + jdx+1).
        let doubled = (i + jdx + 2) as u64;
        for r in doubled_ranks.iter_mut().take(jdx + 1).skip(i) {
            *r = doubled;
        }
        tie_correction += (t * t * t - t) / 48.0;
        i = jdx + 1;
    }
    let w_doubled: u64 = diffs
        .iter()
        .zip(doubled_ranks.iter())
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, &r)| r)
        .sum();

    let p = if n <= 25 {
        exact_signed_rank_p(&doubled_ranks, w_doubled)
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_correction;
        let w = w_doubled as f64 / 2.0;
        let z = ((w - mean).abs() - 0.5).max(0.0) / var.sqrt();
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        (2.0 * (1.0 - normal.cdf(z))).min(1.0)
    };
    Ok((p, p >= alpha))
}

/// Exact two-sided p-value for the signed-rank statistic with (possibly
/// tied) doubled ranks, by dynamic programming over all sign patterns.
fn exact_signed_rank_p(doubled_ranks: &[u64], w_doubled: u64) -> f64 {
    let total: u64 = doubled_ranks.iter().sum();
    let mut counts = vec![0.0f64; total as usize + 1];
    counts[0] = 1.0;
    let mut reach = 0usize;
    for &r in doubled_ranks {
        let r = r as usize;
        reach += r;
        for s in (0..=reach).rev() {
            if s >= r && counts[s - r] > 0.0 {
                counts[s] += counts[s - r];
            }
        }
    }
    let all: f64 = 2f64.powi(doubled_ranks.len() as i32);
    let w = w_doubled as usize;
    let lower: f64 = counts[..=w].iter().sum();
    let upper: f64 = counts[w..].iter().sum();
    (2.0 * (lower.min(upper)) / all).min(1.0)
}

/// Splits variables into slowness-sharing subsets plus a remainder.
pub fn partition_variables(
    data: &StandardizedMatrix,
    cfg: &SsfaConfig,
    alpha: f64,
) -> Result<SubsetPartition> {
    let j = data.j();
    if j == 0 {
        return Err(Error::data("cannot partition zero variables"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::data(format!("alpha must be in (0, 1), got {alpha}")));
    }
    if j == 1 {
        // Nothing to compare against; the lone variable is its own subset.
        return Ok(SubsetPartition {
            sdl: vec![vec![0]],
            sdnl: vec![],
            test_trace: vec![TestRecord {
                variables: vec![0],
                p_value: None,
                accepted: true,
            }],
        });
    }

    let mut remaining: Vec<usize> = (0..j).collect();
    let mut sdl: Vec<Vec<usize>> = Vec::new();
    let mut trace: Vec<TestRecord> = Vec::new();
    let mut reference: Option<DVector<f64>> = None;

    while remaining.len() >= 2 {
        let sub = data.select_columns(&remaining);
        let (_, support) = first_sparse_loading(&sub, cfg)?;
        let vars: Vec<usize> = support.iter().map(|&i| remaining[i]).collect();

        let subset_data = data.select_columns(&vars);
        let sfa = fit_sfa(&subset_data)?;
        let s = &subset_data.x * &sfa.loadings;
        let sdot = &subset_data.xdot * &sfa.loadings;
        let sl = slowness_vector(&s, &sdot)?;

        let accepted = match &reference {
            None => {
                trace.push(TestRecord {
                    variables: vars.clone(),
                    p_value: None,
                    accepted: true,
                });
                true
            }
            Some(r) => {
                let (p, same) = signed_rank_test(&sl, r, alpha)?;
                trace.push(TestRecord {
                    variables: vars.clone(),
                    p_value: Some(p),
                    accepted: same,
                });
                same
            }
        };
        if !accepted {
            break;
        }
        remaining.retain(|v| !vars.contains(v));
        sdl.push(vars);
        reference = Some(sl);
    }

    let sdnl = remaining;
    debug_assert!({
        let mut all: Vec<usize> = sdl.iter().flatten().copied().chain(sdnl.iter().copied()).collect();
        all.sort_unstable();
        all == (0..j).collect::<Vec<_>>()
    });
    Ok(SubsetPartition {
        sdl,
        sdnl,
        test_trace: trace,
    })
}
