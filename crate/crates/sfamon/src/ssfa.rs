//! Sparse slow feature extraction.
//!
//! Loadings are fit by alternating minimization of
//!
//! ```text
//! sum_j ||X* v*_j - X w_j||^2 + lambda * w_j^T Od w_j + lambda1_j * ||w_j||_1
//! ```
//!
//! over sparse loadings `W` (per-column generalized elastic nets) and an
//! orthonormal rotation `V*` (a Procrustes update), where `X*` is a
//! transformed copy of the data and `Od` the temporal covariance. Internally
//! the fit uses the temporally whitened transform `X* = X P L^(-1/2)`
//! (`Od = P L P^T`): with that choice the dense slow-feature solution is an
//! exact stationary point of the alternation, so the unpenalized fit
//! reproduces classical slow feature analysis instead of drifting away from
//! it.

use nalgebra::{DMatrix, DVector};

use crate::data::StandardizedMatrix;
use crate::error::{Error, Result};
use crate::larsen::{
    solve_gen_elastic_net, ElasticNetProblem, GenElasticNetSolution, Lambda1Rule,
};
use crate::linalg::{canonicalize_sign, polar_factor, sym_eig_desc, symmetric_sqrt};
use crate::linalg::generalized_symmetric_eigen;
use crate::sfa::{ridged, slowness_index};

/// Tuning parameters for the sparse fit.
#[derive(Debug, Clone)]
pub struct SsfaConfig {
    /// Quadratic (temporal) penalty weight, >= 0.
    pub lambda: f64,
    /// Per-loading L1 penalty selection rule.
    pub lambda1_rule: Lambda1Rule,
    /// Alternation cap.
    pub max_iter: usize,
    /// Convergence tolerance on the largest change of any normalized
    /// loading entry between iterations.
    pub tol: f64,
    /// Optional cap on nonzeros per loading; `None` allows all variables.
    pub max_support: Option<usize>,
}

impl Default for SsfaConfig {
    fn default() -> Self {
        SsfaConfig {
            lambda: 1.5,
            lambda1_rule: Lambda1Rule::MinSlowness,
            max_iter: 200,
            tol: 1e-6,
            max_support: None,
        }
    }
}

/// A fitted set of sparse loadings, slowest first.
#[derive(Debug, Clone)]
pub struct SsfaModel {
    /// J x k loading matrix; each column is normalized so its feature has
    /// unit training variance.
    pub loadings: DMatrix<f64>,
    /// Slowness of each feature, ascending.
    pub slowness: DVector<f64>,
    /// Nonzero variable indices per loading.
    pub supports: Vec<Vec<usize>>,
    /// Alternations actually run.
    pub iterations: usize,
    /// Whether the loading change fell below tolerance before the cap.
    pub converged: bool,
}

/// Factors the temporal covariance as `A A^T` with `A = P L^(1/2)` from its
/// eigendecomposition and returns the transformed data `X A` along with `A`.
pub fn transform_problem(
    data: &StandardizedMatrix,
    omega_dot: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let j = data.j();
    if omega_dot.nrows() != j || omega_dot.ncols() != j {
        return Err(Error::data(format!(
            "covariance is {}x{} but the data has {} variables",
            omega_dot.nrows(),
            omega_dot.ncols(),
            j
        )));
    }
    let (values, vectors) = sym_eig_desc(omega_dot);
    let scale = values[0].abs().max(f64::MIN_POSITIVE);
    let mut roots = DVector::zeros(j);
    for i in 0..j {
        if values[i] < -1e-10 * scale {
            return Err(Error::numerical(format!(
                "temporal covariance is not positive semidefinite (eigenvalue {:.3e})",
                values[i]
            )));
        }
        roots[i] = values[i].max(0.0).sqrt();
    }
    let a = DMatrix::from_fn(j, j, |r, c| vectors[(r, c)] * roots[c]);
    Ok((&data.x * &a, a))
}

/// Orthonormal rotation minimizing `||X* V - X W||_F` over `V^T V = I`:
/// the polar factor of `X*^T X W`.
pub fn procrustes_update(
    x_star: &DMatrix<f64>,
    x: &DMatrix<f64>,
    w: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    polar_factor(&x_star.tr_mul(&(x * w)))
}

/// `P L^(-1/2)` for the ridged temporal second-moment matrix, so the
/// transformed data has identity temporal covariance.
fn whitening_transform(gdot: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (values, vectors) = sym_eig_desc(gdot);
    let j = values.len();
    let mut inv_roots = DVector::zeros(j);
    for i in 0..j {
        if !(values[i] > 0.0) {
            return Err(Error::numerical(
                "temporal covariance is singular beyond its ridge",
            ));
        }
        inv_roots[i] = 1.0 / values[i].sqrt();
    }
    Ok(DMatrix::from_fn(j, j, |r, c| {
        vectors[(r, c)] * inv_roots[c]
    }))
}

/// Accepts a solved loading, retrying once at the next-smaller path
/// breakpoint if it came back all-zero. Returns the coefficients and the
/// penalty they belong to.
fn resolve_nonzero(sol: &GenElasticNetSolution) -> Result<(DVector<f64>, f64)> {
    let nonzero = |v: &DVector<f64>| v.iter().any(|x| *x != 0.0);
    if nonzero(&sol.w) {
        return Ok((sol.w.clone(), sol.lambda1_used));
    }
    let hat = if sol.lambda1_used.is_infinite() {
        f64::INFINITY
    } else {
        sol.lambda1_used / sol.scale
    };
    match sol.path.breakpoints.iter().find(|bp| bp.lambda1 < hat) {
        Some(bp) if nonzero(&bp.coefficients) => {
            Ok((&bp.coefficients / sol.scale, bp.lambda1 * sol.scale))
        }
        _ => Err(Error::numerical(
            "degenerate sparse loading: all coefficients shrank to zero",
        )),
    }
}

fn normalized_columns(w: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = w.clone();
    for c in 0..w.ncols() {
        let mut col = out.column(c).clone_owned();
        let norm = col.norm();
        if norm > 0.0 {
            col /= norm;
        }
        canonicalize_sign(&mut col);
        out.set_column(c, &col);
    }
    out
}

/// Fits `k` sparse loadings. See the module docs for the objective.
pub fn fit_ssfa(data: &StandardizedMatrix, k: usize, cfg: &SsfaConfig) -> Result<SsfaModel> {
    Ok(fit_ssfa_traced(data, k, cfg)?.0)
}

/// The slowest sparse loading and its support; the entry point used by the
/// variable partition.
pub fn first_sparse_loading(
    data: &StandardizedMatrix,
    cfg: &SsfaConfig,
) -> Result<(DVector<f64>, Vec<usize>)> {
    let model = fit_ssfa(data, 1, cfg)?;
    Ok((model.loadings.column(0).clone_owned(), model.supports[0].clone()))
}

/// As `fit_ssfa`, also returning the objective value after each W update
/// (used to probe descent).
pub(crate) fn fit_ssfa_traced(
    data: &StandardizedMatrix,
    k: usize,
    cfg: &SsfaConfig,
) -> Result<(SsfaModel, Vec<f64>)> {
    let n = data.n();
    let j = data.j();
    if n <= j {
        return Err(Error::data(format!(
            "need more samples than variables to fit ({n} samples, {j} variables)"
        )));
    }
    if k == 0 || k > j {
        return Err(Error::data(format!(
            "loading count must be between 1 and {j}, got {k}"
        )));
    }
    if !(cfg.lambda >= 0.0) {
        return Err(Error::data(format!("lambda must be >= 0, got {}", cfg.lambda)));
    }
    if cfg.max_iter == 0 {
        return Err(Error::data("maxIter must be at least 1"));
    }
    if !(cfg.tol > 0.0) {
        return Err(Error::data(format!("tol must be > 0, got {}", cfg.tol)));
    }
    let max_active = cfg.max_support.unwrap_or(j).min(j);
    if max_active == 0 {
        return Err(Error::data("maxSupport must be at least 1"));
    }

    let nf = n as f64;
    let g = data.x.tr_mul(&data.x) / (nf - 1.0);
    let gdot = ridged(data.xdot.tr_mul(&data.xdot) / (nf - 1.0));

    let a_w = whitening_transform(&gdot)?;
    let x_star = &data.x * &a_w;
    let g_star = a_w.tr_mul(&(&g * &a_w));
    let gdot_star = a_w.tr_mul(&(&gdot * &a_w));

    // Slowest directions of the transformed data seed the rotation; their
    // columns are orthogonalized (they already are, up to rounding, for a
    // nondegenerate pencil).
    let (_, v_init) = generalized_symmetric_eigen(&gdot_star, &g_star).or_else(|_| {
        generalized_symmetric_eigen(&gdot_star, &ridged(g_star.clone()))
            .map_err(|_| Error::numerical("static covariance is singular beyond ridge"))
    })?;
    let mut v_star = polar_factor(&v_init.columns(0, k).clone_owned())?;

    let factor = symmetric_sqrt(&gdot)?;
    let mut problem =
        ElasticNetProblem::from_factor(data.x.clone(), DVector::zeros(n), cfg.lambda, factor)?;

    let mut w = DMatrix::zeros(j, k);
    let mut prev: Option<DMatrix<f64>> = None;
    let mut iterations = 0;
    let mut converged = false;
    let mut trace = Vec::new();

    for it in 1..=cfg.max_iter {
        iterations = it;
        let mut objective = 0.0;
        for c in 0..k {
            let vc = v_star.column(c).clone_owned();
            problem.target = &x_star * &vc;
            let sol = solve_gen_elastic_net(&problem, &cfg.lambda1_rule, max_active)?;
            let (wc, lambda1) = resolve_nonzero(&sol)?;
            objective += problem.objective(&wc, lambda1);
            w.set_column(c, &wc);
        }
        trace.push(objective);

        let wn = normalized_columns(&w);
        if let Some(p) = &prev {
            if (&wn - p).abs().max() < cfg.tol {
                converged = true;
                break;
            }
        }
        prev = Some(wn);
        v_star = procrustes_update(&x_star, &data.x, &w)?;
    }

    // Normalize each feature to unit training variance, fix signs, and
    // order slowest first.
    let mut entries: Vec<(f64, DVector<f64>)> = Vec::with_capacity(k);
    for c in 0..k {
        let mut wc = w.column(c).clone_owned();
        let var = wc.dot(&(&g * &wc));
        if !(var > 0.0) {
            return Err(Error::numerical("sparse feature has zero variance"));
        }
        wc /= var.sqrt();
        canonicalize_sign(&mut wc);
        let s: Vec<f64> = (&data.x * &wc).iter().copied().collect();
        let sd: Vec<f64> = (&data.xdot * &wc).iter().copied().collect();
        entries.push((slowness_index(&s, &sd)?, wc));
    }
    entries.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite slowness"));

    let mut loadings = DMatrix::zeros(j, k);
    let mut slowness = DVector::zeros(k);
    let mut supports = Vec::with_capacity(k);
    for (c, (sl, wc)) in entries.iter().enumerate() {
        loadings.set_column(c, wc);
        slowness[c] = *sl;
        supports.push(
            wc.iter()
                .enumerate()
                .filter(|(_, &v)| v != 0.0)
                .map(|(i, _)| i)
                .collect(),
        );
    }

    Ok((
        SsfaModel {
            loadings,
            slowness,
            supports,
            iterations,
            converged,
        },
        trace,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{sample_cov, RawDataset, Standardizer};
    use crate::sfa::fit_sfa;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn standardized(values: DMatrix<f64>) -> StandardizedMatrix {
        let names = (0..values.ncols()).map(|c| format!("v{c}")).collect();
        let raw = RawDataset::new(names, values).unwrap();
        Standardizer::fit(&raw).unwrap().apply(&raw).unwrap()
    }

    fn random_standardized(seed: u64, n: usize, j: usize) -> StandardizedMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        standardized(DMatrix::from_fn(n, j, |_, _| {
            rng.sample::<f64, _>(StandardNormal)
        }))
    }

    /// Two latent blocks ({0,1,2} slow, {3,4} faster) plus five noise
    /// variables; each block member is its driver plus measurement noise.
    fn two_block_data(seed: u64, n: usize) -> StandardizedMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut z1 = 0.0f64;
        let mut z2 = 0.0f64;
        let mut values = DMatrix::zeros(n, 10);
        for r in 0..n {
            z1 = 0.99 * z1 + 0.14 * rng.sample::<f64, _>(StandardNormal);
            z2 = 0.85 * z2 + 0.52 * rng.sample::<f64, _>(StandardNormal);
            for c in 0..3 {
                values[(r, c)] = z1 + 0.3 * rng.sample::<f64, _>(StandardNormal);
            }
            for c in 3..5 {
                values[(r, c)] = z2 + 0.5 * rng.sample::<f64, _>(StandardNormal);
            }
            for c in 5..10 {
                values[(r, c)] = rng.sample::<f64, _>(StandardNormal);
            }
        }
        standardized(values)
    }

    #[test]
    fn transform_of_identity_covariance_is_identity() {
        let d = random_standardized(1, 50, 3);
        let (x_star, a) = transform_problem(&d, &DMatrix::identity(3, 3)).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                let expect = if r == c { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(a[(r, c)].abs(), expect, epsilon = 1e-12);
            }
        }
        assert_abs_diff_eq!((&x_star - &d.x).abs().max(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn transform_of_diagonal_covariance() {
        let d = random_standardized(2, 50, 2);
        let od = DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 1.0]);
        let (_, a) = transform_problem(&d, &od).unwrap();
        assert_abs_diff_eq!(a[(0, 0)], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(a[(1, 1)], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(a[(0, 1)], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(a[(1, 0)], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn transform_factorizes_random_covariances() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
            let b = DMatrix::from_fn(4, 4, |_, _| rng.sample::<f64, _>(StandardNormal));
            let od = &b * b.transpose() + DMatrix::identity(4, 4) * 0.1;
            let d = random_standardized(seed, 40, 4);
            let (_, a) = transform_problem(&d, &od).unwrap();
            let back = &a * a.transpose();
            assert!((&back - &od).abs().max() <= 1e-8);
        }
    }

    #[test]
    fn transform_rejects_indefinite_covariance() {
        let d = random_standardized(3, 40, 2);
        let od = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(transform_problem(&d, &od).is_err());
    }

    #[test]
    fn procrustes_returns_orthogonal_input() {
        let th = 0.7f64;
        let m = DMatrix::from_row_slice(2, 2, &[th.cos(), -th.sin(), th.sin(), th.cos()]);
        // With X = W = I the product inside the update is Xstar^T itself.
        let v = procrustes_update(&m.transpose(), &DMatrix::identity(2, 2), &DMatrix::identity(2, 2))
            .unwrap();
        assert!((&v - &m).abs().max() < 1e-10);
    }

    #[test]
    fn procrustes_of_positive_diagonal_is_identity() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 3.0]);
        let v = procrustes_update(&m.transpose(), &DMatrix::identity(2, 2), &DMatrix::identity(2, 2))
            .unwrap();
        assert!((&v - &DMatrix::identity(2, 2)).abs().max() < 1e-12);
    }

    #[test]
    fn procrustes_beats_random_rotations() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 30;
        let x_star = DMatrix::from_fn(n, 4, |_, _| rng.sample::<f64, _>(StandardNormal));
        let x = DMatrix::from_fn(n, 4, |_, _| rng.sample::<f64, _>(StandardNormal));
        let w = DMatrix::from_fn(4, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
        let v = procrustes_update(&x_star, &x, &w).unwrap();
        let vtv = v.tr_mul(&v);
        assert!((&vtv - &DMatrix::identity(3, 3)).abs().max() < 1e-10);
        let target = &x * &w;
        let best = (&x_star * &v - &target).norm_squared();
        for _ in 0..1000 {
            let q = DMatrix::from_fn(4, 3, |_, _| rng.sample::<f64, _>(StandardNormal))
                .qr()
                .q();
            let obj = (&x_star * &q - &target).norm_squared();
            assert!(obj >= best - 1e-9);
        }
    }

    #[test]
    fn unpenalized_fit_matches_dense_slow_features() {
        for seed in 0..10 {
            let d = two_block_data(300 + seed, 500).select_columns(&[0, 1, 2, 3, 4, 5]);
            let sfa = fit_sfa(&d).unwrap();
            for lambda in [0.0, 1.5] {
                let cfg = SsfaConfig {
                    lambda,
                    lambda1_rule: Lambda1Rule::Fixed(0.0),
                    ..SsfaConfig::default()
                };
                let m = fit_ssfa(&d, 6, &cfg).unwrap();
                assert!(m.converged, "seed {seed} lambda {lambda} did not converge");
                for c in 0..6 {
                    let a = m.loadings.column(c).clone_owned().normalize();
                    let b = sfa.loadings.column(c).clone_owned().normalize();
                    let cosine = a.dot(&b).abs().min(1.0);
                    let angle = cosine.acos();
                    assert!(
                        angle < 1e-3,
                        "seed {seed} lambda {lambda} column {c}: angle {angle:.2e}"
                    );
                }
            }
        }
    }

    #[test]
    fn default_rule_recovers_planted_blocks() {
        let d = two_block_data(42, 1000);
        let m = fit_ssfa(&d, 2, &SsfaConfig::default()).unwrap();
        assert_eq!(m.supports[0], vec![0, 1, 2]);
        assert_eq!(m.supports[1], vec![3, 4]);
        assert!(m.slowness[0] <= m.slowness[1]);
        // Unit variance after normalization.
        for c in 0..2 {
            let wc = m.loadings.column(c).clone_owned();
            let var = (&d.x * &wc).norm_squared() / (d.n() as f64 - 1.0);
            assert_abs_diff_eq!(var, 1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn duplicated_sinusoid_pair_is_selected_together() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 400;
        let mut values = DMatrix::zeros(n, 5);
        for r in 0..n {
            let s = (2.0 * std::f64::consts::PI * r as f64 / n as f64).sin();
            values[(r, 0)] = s + 0.3 * rng.sample::<f64, _>(StandardNormal);
            values[(r, 1)] = s + 0.3 * rng.sample::<f64, _>(StandardNormal);
            for c in 2..5 {
                values[(r, c)] = rng.sample::<f64, _>(StandardNormal);
            }
        }
        let d = standardized(values);
        let (_, support) = first_sparse_loading(&d, &SsfaConfig::default()).unwrap();
        assert_eq!(support, vec![0, 1]);
    }

    #[test]
    fn support_cap_is_respected() {
        let d = two_block_data(7, 600);
        let cfg = SsfaConfig {
            max_support: Some(2),
            ..SsfaConfig::default()
        };
        let m = fit_ssfa(&d, 3, &cfg).unwrap();
        for s in &m.supports {
            assert!(!s.is_empty() && s.len() <= 2, "support {s:?}");
        }
    }

    #[test]
    fn identical_variables_yield_a_usable_loading() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let n = 300;
        let mut z = 0.0f64;
        let mut shared = Vec::with_capacity(n);
        for _ in 0..n {
            z = 0.98 * z + 0.2 * rng.sample::<f64, _>(StandardNormal);
            shared.push(z);
        }
        let values = DMatrix::from_fn(n, 5, |r, _| shared[r]);
        let d = standardized(values);
        let (w, support) = first_sparse_loading(&d, &SsfaConfig::default()).unwrap();
        assert!(!support.is_empty());
        let feature = &d.x * &w;
        let sig = DVector::from_vec(shared.clone());
        let sig_c = &sig - DVector::repeat(n, sig.mean());
        let corr = feature.dot(&sig_c) / (feature.norm() * sig_c.norm());
        assert!(corr.abs() > 0.999, "corr={corr}");
    }

    #[test]
    fn single_variable_fit_is_trivial() {
        let d = random_standardized(21, 200, 1);
        let m = fit_ssfa(&d, 1, &SsfaConfig::default()).unwrap();
        assert_abs_diff_eq!(m.loadings[(0, 0)], 1.0, epsilon = 1e-10);
        let s: Vec<f64> = d.x.column(0).iter().copied().collect();
        let sd: Vec<f64> = d.xdot.column(0).iter().copied().collect();
        assert_abs_diff_eq!(
            m.slowness[0],
            slowness_index(&s, &sd).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn infinite_lambda1_is_degenerate() {
        let d = random_standardized(5, 100, 4);
        let cfg = SsfaConfig {
            lambda1_rule: Lambda1Rule::Fixed(f64::INFINITY),
            ..SsfaConfig::default()
        };
        let err = fit_ssfa(&d, 1, &cfg).unwrap_err();
        assert!(err.to_string().contains("degenerate"));
    }

    #[test]
    fn objective_descends_under_fixed_penalty() {
        let d = two_block_data(3, 400);
        let cfg = SsfaConfig {
            lambda1_rule: Lambda1Rule::Fixed(0.3),
            ..SsfaConfig::default()
        };
        let (_, trace) = fit_ssfa_traced(&d, 3, &cfg).unwrap();
        assert!(trace.len() >= 2);
        for pair in trace.windows(2) {
            assert!(
                pair[1] <= pair[0] + 1e-6 * (1.0 + pair[0].abs()),
                "objective rose: {} -> {}",
                pair[0],
                pair[1]
            );
        }
    }

    #[test]
    fn larger_fixed_penalty_never_grows_support() {
        let d = two_block_data(15, 500);
        let mut last = usize::MAX;
        for lambda1 in [0.05, 0.5, 2.0, 8.0] {
            let cfg = SsfaConfig {
                lambda1_rule: Lambda1Rule::Fixed(lambda1),
                ..SsfaConfig::default()
            };
            let (_, support) = first_sparse_loading(&d, &cfg).unwrap();
            assert!(support.len() <= last, "support grew at lambda1={lambda1}");
            last = support.len();
        }
    }

    #[test]
    fn slowest_sparse_feature_is_close_to_dense_optimum() {
        let d = two_block_data(33, 1000);
        let sfa = fit_sfa(&d).unwrap();
        let m = fit_ssfa(&d, 2, &SsfaConfig::default()).unwrap();
        assert!(
            m.slowness[0] <= sfa.slowness[0] * 1.05 + 1e-12,
            "sparse {} vs dense {} (supports {:?})",
            m.slowness[0],
            sfa.slowness[0],
            m.supports
        );
        let cov = sample_cov(&(&d.x * &m.loadings));
        // Distinct loadings, not copies of one direction.
        assert!(cov[(0, 1)].abs() < 0.5);
    }
}
