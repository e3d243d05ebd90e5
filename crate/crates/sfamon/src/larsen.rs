//! Least-angle regression path solver for the generalized elastic net.
//!
//! The problem solved per loading is
//!
//! ```text
//! min_w ||y - X w||^2 + lambda * w^T Od w + lambda1 * ||w||_1
//! ```
//!
//! where `Od` is a temporal covariance. An augmentation turns this into an
//! ordinary lasso on a stacked design: rows `(X; sqrt(lambda) * F)` scaled by
//! `(1 + lambda)^(-1/2)` with `F F^T = Od`, target `(y; 0)`, penalty
//! `lambda1 / sqrt(1 + lambda)` and solution `w_hat = sqrt(1 + lambda) * w`.
//! The lasso itself is solved exactly along the full piecewise-linear path,
//! with entry and drop events, by least-angle regression.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::symmetric_sqrt;

/// Relative slack for the min-slowness penalty selection: breakpoints whose
/// feature slowness is within this fraction of the path minimum count as
/// ties, resolved toward the sparsest support. The value sits above the
/// in-sample gain spurious variables can offer (a percent or two) and below
/// the gain a genuinely informative variable brings.
pub const SLOWNESS_SLACK: f64 = 0.05;

/// One generalized elastic net instance.
#[derive(Debug, Clone)]
pub struct ElasticNetProblem {
    /// N' x J design matrix.
    pub design: DMatrix<f64>,
    /// Length-N' regression target.
    pub target: DVector<f64>,
    /// Quadratic penalty weight, >= 0.
    pub lambda: f64,
    /// J x J factor with `F F^T` equal to the temporal covariance.
    pub omega_dot_factor: DMatrix<f64>,
}

impl ElasticNetProblem {
    /// Builds a problem from the temporal covariance itself; the stored
    /// factor is its symmetric square root.
    pub fn new(
        design: DMatrix<f64>,
        target: DVector<f64>,
        lambda: f64,
        omega_dot: &DMatrix<f64>,
    ) -> Result<Self> {
        let factor = symmetric_sqrt(omega_dot)?;
        Self::from_factor(design, target, lambda, factor)
    }

    /// Builds a problem from a precomputed factor (`F F^T = Od`).
    pub fn from_factor(
        design: DMatrix<f64>,
        target: DVector<f64>,
        lambda: f64,
        omega_dot_factor: DMatrix<f64>,
    ) -> Result<Self> {
        let j = design.ncols();
        if target.len() != design.nrows() {
            return Err(Error::data(format!(
                "target length {} does not match {} design rows",
                target.len(),
                design.nrows()
            )));
        }
        if omega_dot_factor.nrows() != j || omega_dot_factor.ncols() != j {
            return Err(Error::data("covariance factor shape does not match design"));
        }
        if !(lambda >= 0.0) {
            return Err(Error::data(format!("lambda must be >= 0, got {lambda}")));
        }
        Ok(ElasticNetProblem {
            design,
            target,
            lambda,
            omega_dot_factor,
        })
    }

    /// Value of the penalized objective at `w` for a given `lambda1`.
    pub fn objective(&self, w: &DVector<f64>, lambda1: f64) -> f64 {
        let r = &self.target - &self.design * w;
        let fw = self.omega_dot_factor.tr_mul(w);
        r.norm_squared() + self.lambda * fw.norm_squared() + lambda1 * w.abs().sum()
    }
}

/// The lasso-equivalent form of an [`ElasticNetProblem`].
#[derive(Debug, Clone)]
pub struct AugmentedProblem {
    /// (N' + J) x J stacked design.
    pub design: DMatrix<f64>,
    /// Stacked target, zero-padded.
    pub target: DVector<f64>,
    /// `sqrt(1 + lambda)`; maps penalties and coefficients between the two
    /// problem scales.
    pub scale: f64,
}

/// Stacks the quadratic penalty into the design so the problem becomes an
/// ordinary lasso.
pub fn augment(problem: &ElasticNetProblem) -> AugmentedProblem {
    let n = problem.design.nrows();
    let j = problem.design.ncols();
    let scale = (1.0 + problem.lambda).sqrt();
    let lam_root = problem.lambda.sqrt();
    let mut design = DMatrix::zeros(n + j, j);
    for r in 0..n {
        for c in 0..j {
            design[(r, c)] = problem.design[(r, c)] / scale;
        }
    }
    for r in 0..j {
        for c in 0..j {
            // F is symmetric, so rows of F give F^T F = Od.
            design[(n + r, c)] = lam_root * problem.omega_dot_factor[(r, c)] / scale;
        }
    }
    let mut target = DVector::zeros(n + j);
    for r in 0..n {
        target[r] = problem.target[r];
    }
    AugmentedProblem {
        design,
        target,
        scale,
    }
}

/// One event point on the lasso path.
#[derive(Debug, Clone)]
pub struct PathBreakpoint {
    /// Penalty value; the coefficients minimize
    /// `||y - X b||^2 + lambda1 * ||b||_1` here.
    pub lambda1: f64,
    pub coefficients: DVector<f64>,
    /// Residual sum of squares at this point.
    pub fit_error: f64,
}

impl PathBreakpoint {
    pub fn support(&self) -> Vec<usize> {
        self.coefficients
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Full piecewise-linear lasso path. `lambda1` is strictly decreasing along
/// `breakpoints`; coefficients at intermediate penalties interpolate linearly.
#[derive(Debug, Clone)]
pub struct LarsPath {
    pub breakpoints: Vec<PathBreakpoint>,
}

impl LarsPath {
    /// Exact lasso solution at an arbitrary penalty, clamped to the path ends.
    pub fn coefficients_at(&self, lambda1: f64) -> DVector<f64> {
        let bps = &self.breakpoints;
        if lambda1 >= bps[0].lambda1 {
            return bps[0].coefficients.clone();
        }
        let last = bps.len() - 1;
        if lambda1 <= bps[last].lambda1 {
            return bps[last].coefficients.clone();
        }
        for k in 0..last {
            let (hi, lo) = (bps[k].lambda1, bps[k + 1].lambda1);
            if lambda1 <= hi && lambda1 >= lo {
                let u = (hi - lambda1) / (hi - lo);
                return &bps[k].coefficients * (1.0 - u) + &bps[k + 1].coefficients * u;
            }
        }
        bps[last].coefficients.clone()
    }
}

const GAMMA_TOL: f64 = 1e-12;

/// Runs least-angle regression with the lasso modification on a design and
/// target, recording a breakpoint at every entry or drop event.
///
/// The path stops once the active set would exceed
/// `min(max_active, J, rows - 1)` or the penalty reaches zero.
pub fn lars_en_path(
    design: &DMatrix<f64>,
    target: &DVector<f64>,
    max_active: usize,
) -> Result<LarsPath> {
    let n = design.nrows();
    let j = design.ncols();
    if n < 2 {
        return Err(Error::data("need at least 2 design rows"));
    }
    let cap = max_active.min(j).min(n - 1).max(1);

    let mut beta: DVector<f64> = DVector::zeros(j);
    let mut active: Vec<usize> = Vec::new();
    let mut signs: Vec<f64> = Vec::new();
    let mut breakpoints: Vec<PathBreakpoint> = Vec::new();

    let c0 = design.tr_mul(target);
    let cmax0 = c0.amax();
    let zero_tol = 1e-12 * cmax0.max(1.0);

    let record = |bps: &mut Vec<PathBreakpoint>, lambda1: f64, beta: &DVector<f64>, rss: f64| {
        let lambda1 = if lambda1 < zero_tol { 0.0 } else { lambda1 };
        if let Some(last) = bps.last_mut() {
            if lambda1 >= last.lambda1 - 1e-12 * (1.0 + last.lambda1) {
                // Simultaneous events merge into one breakpoint.
                last.lambda1 = lambda1.min(last.lambda1);
                last.coefficients = beta.clone();
                last.fit_error = rss;
                return;
            }
        }
        bps.push(PathBreakpoint {
            lambda1,
            coefficients: beta.clone(),
            fit_error: rss,
        });
    };

    record(
        &mut breakpoints,
        2.0 * cmax0,
        &beta,
        target.norm_squared(),
    );
    if cmax0 <= zero_tol {
        breakpoints[0].lambda1 = 0.0;
        return Ok(LarsPath { breakpoints });
    }

    let mut dropped = false;
    let max_segments = 50 * (j + 2);
    for _segment in 0.. {
        if _segment >= max_segments {
            return Err(Error::numerical(
                "lasso path did not terminate (cycling between entry and drop events)",
            ));
        }

        let residual = target - design * &beta;
        let c = design.tr_mul(&residual);
        let cmax = if active.is_empty() {
            c.amax()
        } else {
            active.iter().map(|&i| c[i].abs()).fold(0.0, f64::max)
        };
        if cmax <= zero_tol {
            record(&mut breakpoints, 0.0, &beta, residual.norm_squared());
            break;
        }

        if !dropped {
            // Enter the most correlated inactive variable; ties go to the
            // lowest column index.
            let mut entry: Option<(usize, f64)> = None;
            for k in 0..j {
                if active.contains(&k) {
                    continue;
                }
                let v = c[k].abs();
                if entry.map_or(true, |(_, best)| v > best + 1e-15) {
                    entry = Some((k, v));
                }
            }
            if let Some((k, v)) = entry {
                if v >= cmax * (1.0 - 1e-9) {
                    if active.len() == cap {
                        break;
                    }
                    active.push(k);
                    signs.push(if c[k] >= 0.0 { 1.0 } else { -1.0 });
                }
            }
        }
        dropped = false;

        // Direction on the active set: G_A d = s_A.
        let xa = design.select_columns(active.iter());
        let gram = xa.tr_mul(&xa);
        let chol = gram.cholesky().ok_or_else(|| {
            Error::numerical("active-set Gram matrix is singular beyond tolerance")
        })?;
        let s_vec = DVector::from_vec(signs.clone());
        let delta = chol.solve(&s_vec);
        let a_full = design.tr_mul(&(&xa * &delta));

        // Smallest positive step among entry events, drop events, and the
        // point where active correlations vanish.
        let mut gamma = cmax;
        let mut drop_hits: Vec<usize> = Vec::new();
        for k in 0..j {
            if active.contains(&k) {
                continue;
            }
            for (num, den) in [
                (cmax - c[k], 1.0 - a_full[k]),
                (cmax + c[k], 1.0 + a_full[k]),
            ] {
                if den.abs() > 1e-14 {
                    let g = num / den;
                    if g > GAMMA_TOL && g < gamma - GAMMA_TOL {
                        gamma = g;
                    }
                }
            }
        }
        for (pos, &i) in active.iter().enumerate() {
            if delta[pos].abs() > 1e-14 {
                let g = -beta[i] / delta[pos];
                if g > GAMMA_TOL && g < gamma - GAMMA_TOL {
                    gamma = g;
                    drop_hits.clear();
                    drop_hits.push(pos);
                } else if g > GAMMA_TOL && (g - gamma).abs() <= GAMMA_TOL && !drop_hits.is_empty() {
                    drop_hits.push(pos);
                }
            }
        }

        for (pos, &i) in active.iter().enumerate() {
            beta[i] += gamma * delta[pos];
        }
        if !drop_hits.is_empty() {
            for &pos in drop_hits.iter().rev() {
                beta[active[pos]] = 0.0;
                active.remove(pos);
                signs.remove(pos);
            }
            dropped = true;
        }

        let residual = target - design * &beta;
        let new_cmax = if active.is_empty() {
            design.tr_mul(&residual).amax()
        } else {
            let c_new = design.tr_mul(&residual);
            active.iter().map(|&i| c_new[i].abs()).fold(0.0, f64::max)
        };
        record(
            &mut breakpoints,
            2.0 * new_cmax,
            &beta,
            residual.norm_squared(),
        );
    }

    Ok(LarsPath { breakpoints })
}

/// How the penalty level is chosen from a path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Lambda1Rule {
    /// Solve at exactly this penalty (in the unaugmented problem's scale).
    Fixed(f64),
    /// Breakpoint with the smallest residual sum of squares.
    BestFitError,
    /// Breakpoint whose feature `X w` has the smallest slowness; the default
    /// for loading extraction.
    MinSlowness,
}

/// A solved generalized elastic net.
#[derive(Debug, Clone)]
pub struct GenElasticNetSolution {
    pub w: DVector<f64>,
    /// Penalty actually used, in the unaugmented problem's scale.
    pub lambda1_used: f64,
    /// The underlying lasso path (augmented coefficient scale).
    pub path: LarsPath,
    /// `sqrt(1 + lambda)`, for mapping path coefficients back.
    pub scale: f64,
}

/// Solves one generalized elastic net by augmentation plus the LARS path,
/// then picks the penalty by `rule`.
pub fn solve_gen_elastic_net(
    problem: &ElasticNetProblem,
    rule: &Lambda1Rule,
    max_active: usize,
) -> Result<GenElasticNetSolution> {
    let aug = augment(problem);
    let path = lars_en_path(&aug.design, &aug.target, max_active)?;

    let (w_hat, lambda1_hat) = match rule {
        Lambda1Rule::Fixed(v) => {
            if *v < 0.0 {
                return Err(Error::data(format!("lambda1 must be >= 0, got {v}")));
            }
            let hat = if v.is_infinite() { f64::INFINITY } else { v / aug.scale };
            (path.coefficients_at(hat), hat)
        }
        Lambda1Rule::BestFitError => {
            let bp = path
                .breakpoints
                .iter()
                .min_by(|a, b| a.fit_error.partial_cmp(&b.fit_error).expect("finite rss"))
                .expect("path has at least one breakpoint");
            (bp.coefficients.clone(), bp.lambda1)
        }
        Lambda1Rule::MinSlowness => {
            let n = problem.design.nrows();
            let omega = problem.design.tr_mul(&problem.design) / (n as f64 - 1.0);
            let omega_dot = &problem.omega_dot_factor * problem.omega_dot_factor.transpose();
            // Slowness per nonzero breakpoint; the direction is scale
            // invariant, so augmented coefficients can be used directly.
            let mut scored: Vec<(usize, f64, usize)> = Vec::new();
            for (i, bp) in path.breakpoints.iter().enumerate() {
                let w = &bp.coefficients;
                let var = w.dot(&(&omega * w));
                if var <= 1e-300 {
                    continue;
                }
                let sl = w.dot(&(&omega_dot * w)) / var;
                scored.push((i, sl, bp.support().len()));
            }
            match scored.iter().map(|&(_, sl, _)| sl).fold(f64::INFINITY, f64::min) {
                sl_min if sl_min.is_finite() => {
                    // Adding variables always shaves a little in-sample
                    // slowness by fitting noise (a relative gain of order
                    // J/N), so a raw argmin degenerates to the dense end of
                    // the path. Treat everything within the slack band as a
                    // tie and resolve toward the sparsest support; remaining
                    // ties go to the larger penalty.
                    let band = sl_min * (1.0 + SLOWNESS_SLACK);
                    // Smallest support first; among equal supports the
                    // slowest feature; remaining ties keep the larger
                    // penalty (earlier path order).
                    let mut best: Option<(usize, f64, usize)> = None;
                    for &(i, sl, size) in &scored {
                        if sl > band {
                            continue;
                        }
                        let better = match best {
                            None => true,
                            Some((_, bsl, bsize)) => size < bsize || (size == bsize && sl < bsl),
                        };
                        if better {
                            best = Some((i, sl, size));
                        }
                    }
                    let bp = &path.breakpoints[best.expect("band contains the minimum").0];
                    (bp.coefficients.clone(), bp.lambda1)
                }
                _ => {
                    let bp = path.breakpoints.last().unwrap();
                    (bp.coefficients.clone(), bp.lambda1)
                }
            }
        }
    };

    let w = &w_hat / aug.scale;
    let lambda1_used = if lambda1_hat.is_infinite() {
        f64::INFINITY
    } else {
        lambda1_hat * aug.scale
    };
    Ok(GenElasticNetSolution {
        w,
        lambda1_used,
        path,
        scale: aug.scale,
    })
}
