//! Slow feature analysis on a standardized matrix.
//!
//! Loadings solve the generalized eigenproblem `Od w = lambda O w` where `O`
//! and `Od` are the static and temporal second-moment matrices of the data,
//! both scaled by the same `1 / (N - 1)` so that each eigenvalue equals the
//! slowness index of its extracted feature. Features are sorted slowest
//! first and split into a system part (the first `system_count`) and a
//! residual part.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{mat_serde, sample_cov, vec_serde, StandardizedMatrix, RIDGE_REL};
use crate::error::{Error, Result};
use crate::linalg::{canonicalize_sign, generalized_symmetric_eigen};

/// Ratio of temporal to static energy of a series: `sum(sdot^2) / sum(s^2)`.
/// Small values mean slow variation.
pub fn slowness_index(s: &[f64], sdot: &[f64]) -> Result<f64> {
    let denom: f64 = s.iter().map(|v| v * v).sum();
    if denom <= 0.0 {
        return Err(Error::data("slowness of a zero-variance series is undefined"));
    }
    let num: f64 = sdot.iter().map(|v| v * v).sum();
    Ok(num / denom)
}

/// A fitted slow feature model for one variable subset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SfaModel {
    /// J x J loading matrix, columns sorted by ascending slowness. Features
    /// are `s = W^T x`.
    #[serde(with = "mat_serde")]
    pub loadings: DMatrix<f64>,
    /// Generalized eigenvalues, ascending; entry j is the slowness of
    /// feature j.
    #[serde(with = "vec_serde")]
    pub slowness: DVector<f64>,
    /// Number of slow (system) features retained.
    pub system_count: usize,
    /// Training covariance of the temporal system features, ridged.
    #[serde(with = "mat_serde")]
    pub omega_dot_system: DMatrix<f64>,
    /// Training covariance of the temporal residual features, ridged.
    #[serde(with = "mat_serde")]
    pub omega_dot_residual: DMatrix<f64>,
}

/// A projected sample: feature values plus, when a previous sample exists,
/// the temporal difference.
#[derive(Debug, Clone)]
pub struct FeaturePair {
    pub values: DVector<f64>,
    pub temporal: Option<DVector<f64>>,
}

/// Monitoring statistics of one sample against one model.
#[derive(Debug, Clone, Copy)]
pub struct SubsetStats {
    pub t2s: f64,
    pub t2f: f64,
    pub d2s: Option<f64>,
    pub d2f: Option<f64>,
}

pub(crate) fn ridged(mut m: DMatrix<f64>) -> DMatrix<f64> {
    let j = m.nrows();
    if j > 0 {
        let ridge = RIDGE_REL * m.trace() / j as f64;
        for d in 0..j {
            m[(d, d)] += ridge;
        }
    }
    m
}

/// Second-moment matrices of `x` and `xdot`, both over `N - 1`, so that the
/// eigenvalues of the pencil match raw slowness ratios of the features.
fn gram_pair(data: &StandardizedMatrix) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = data.n() as f64;
    let g = data.x.tr_mul(&data.x) / (n - 1.0);
    let gdot = ridged(data.xdot.tr_mul(&data.xdot) / (n - 1.0));
    (g, gdot)
}

/// Fits a slow feature model. Requires more samples than variables.
pub fn fit_sfa(data: &StandardizedMatrix) -> Result<SfaModel> {
    let n = data.n();
    let j = data.j();
    if n <= j {
        return Err(Error::data(format!(
            "need more samples than variables to fit ({n} samples, {j} variables)"
        )));
    }

    let (g, gdot) = gram_pair(data);
    let (slowness, mut loadings) = generalized_symmetric_eigen(&gdot, &g).or_else(|_| {
        // Retry once with a static ridge before giving up.
        let g2 = ridged(g.clone());
        generalized_symmetric_eigen(&gdot, &g2)
            .map_err(|_| Error::numerical("static covariance is singular beyond ridge"))
    })?;
    for c in 0..j {
        let mut col = loadings.column(c).clone_owned();
        canonicalize_sign(&mut col);
        loadings.set_column(c, &col);
    }

    let s = &data.x * &loadings;
    let sdot = &data.xdot * &loadings;
    let system_count = select_system_count(&s, &sdot, data)?;
    let sdot_sys = sdot.columns(0, system_count).clone_owned();
    let sdot_res = sdot.columns(system_count, j - system_count).clone_owned();
    let omega_dot_system = if system_count > 0 {
        ridged(sample_cov(&sdot_sys))
    } else {
        DMatrix::zeros(0, 0)
    };
    let omega_dot_residual = if j - system_count > 0 {
        ridged(sample_cov(&sdot_res))
    } else {
        DMatrix::zeros(0, 0)
    };

    Ok(SfaModel {
        loadings,
        slowness,
        system_count,
        omega_dot_system,
        omega_dot_residual,
    })
}

/// Number of features at least as slow as the fastest raw variable.
///
/// The threshold is the largest per-variable slowness ratio. Feature
/// columns arrive sorted by slowness, so scanning until the first ratio
/// above the threshold keeps the retained set a prefix.
pub fn select_system_count(
    s: &DMatrix<f64>,
    sdot: &DMatrix<f64>,
    data: &StandardizedMatrix,
) -> Result<usize> {
    let mut threshold = f64::NEG_INFINITY;
    for c in 0..data.j() {
        let xv: Vec<f64> = data.x.column(c).iter().copied().collect();
        let dv: Vec<f64> = data.xdot.column(c).iter().copied().collect();
        threshold = threshold.max(slowness_index(&xv, &dv)?);
    }
    let mut count = 0;
    for c in 0..s.ncols() {
        let sv: Vec<f64> = s.column(c).iter().copied().collect();
        let dv: Vec<f64> = sdot.column(c).iter().copied().collect();
        if slowness_index(&sv, &dv)? <= threshold {
            count += 1;
        } else {
            break;
        }
    }
    Ok(count)
}

impl SfaModel {
    pub fn j(&self) -> usize {
        self.loadings.nrows()
    }

    /// Projects one standardized sample, splitting system from residual
    /// features. Without a previous sample the temporal parts are absent.
    pub fn project(
        &self,
        x: &DVector<f64>,
        x_prev: Option<&DVector<f64>>,
    ) -> (FeaturePair, FeaturePair) {
        let m = self.system_count;
        let s = self.loadings.tr_mul(x);
        let sdot = x_prev.map(|p| self.loadings.tr_mul(&(x - p)));
        let split = |v: &DVector<f64>| (v.rows(0, m).clone_owned(), v.rows(m, self.j() - m).clone_owned());
        let (s_sys, s_res) = split(&s);
        let (d_sys, d_res) = match &sdot {
            Some(d) => {
                let (a, b) = split(d);
                (Some(a), Some(b))
            }
            None => (None, None),
        };
        (
            FeaturePair {
                values: s_sys,
                temporal: d_sys,
            },
            FeaturePair {
                values: s_res,
                temporal: d_res,
            },
        )
    }

    /// T2 and D2 statistics for one projected sample.
    ///
    /// `T2 = s^T s` on unit-variance features; `D2` whitens the temporal
    /// features by their training covariance. Empty blocks score zero.
    pub fn statistics(&self, system: &FeaturePair, residual: &FeaturePair) -> Result<SubsetStats> {
        let t2s = system.values.norm_squared();
        let t2f = residual.values.norm_squared();
        let d2s = match &system.temporal {
            Some(d) => Some(mahalanobis_sq(d, &self.omega_dot_system)?),
            None => None,
        };
        let d2f = match &residual.temporal {
            Some(d) => Some(mahalanobis_sq(d, &self.omega_dot_residual)?),
            None => None,
        };
        Ok(SubsetStats { t2s, t2f, d2s, d2f })
    }
}

pub(crate) fn mahalanobis_sq(v: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    if v.is_empty() {
        return Ok(0.0);
    }
    let chol = cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::numerical("temporal feature covariance is not positive definite"))?;
    Ok(v.dot(&chol.solve(v)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{RawDataset, Standardizer};
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

    /// Two slow latent drivers mixed into `j` variables plus noise.
    fn planted_slow(seed: u64, n: usize, j: usize) -> StandardizedMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut z1 = 0.0f64;
        let mut z2 = 0.0f64;
        let mut values = DMatrix::zeros(n, j);
        for r in 0..n {
            z1 = 0.995 * z1 + 0.1 * rng.sample::<f64, _>(StandardNormal);
            z2 = 0.97 * z2 + 0.25 * rng.sample::<f64, _>(StandardNormal);
            for c in 0..j {
                let w1 = ((c + 1) as f64 * 0.7).sin();
                let w2 = ((c + 1) as f64 * 1.3).cos();
                values[(r, c)] =
                    w1 * z1 + w2 * z2 + 0.2 * rng.sample::<f64, _>(StandardNormal);
            }
        }
        standardized(values)
    }

    #[test]
    fn slowness_of_alternating_series() {
        let n = 100;
        let s: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let sdot: Vec<f64> = s.windows(2).map(|w| w[1] - w[0]).collect();
        let sl = slowness_index(&s, &sdot).unwrap();
        assert_abs_diff_eq!(sl, 4.0 * 99.0 / 100.0, epsilon = 1e-12);
    }

    #[test]
    fn slowness_of_standardized_ramp() {
        let n = 100usize;
        let d = standardized(DMatrix::from_fn(n, 1, |r, _| r as f64));
        let s: Vec<f64> = d.x.column(0).iter().copied().collect();
        let sdot: Vec<f64> = d.xdot.column(0).iter().copied().collect();
        let sl = slowness_index(&s, &sdot).unwrap();
        assert_abs_diff_eq!(sl, 12.0 / (100.0 * 101.0), epsilon = 1e-12);
        // Around 12 / N^2.
        assert!((sl - 0.0012).abs() < 0.0002);
    }

    #[test]
    fn slowness_of_unit_sinusoid() {
        let n = 100usize;
        let s: Vec<f64> = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * i as f64 / n as f64).sin())
            .collect();
        let sdot: Vec<f64> = s.windows(2).map(|w| w[1] - w[0]).collect();
        let sl = slowness_index(&s, &sdot).unwrap();
        let expect = (2.0 * std::f64::consts::PI / n as f64).powi(2);
        assert!((sl - expect).abs() / expect < 0.05, "sl={sl} expect={expect}");
    }

    #[test]
    fn slowness_rejects_zero_series() {
        assert!(slowness_index(&[0.0, 0.0], &[0.0]).is_err());
    }

    #[test]
    fn single_variable_model_is_trivial() {
        let d = random_standardized(1, 200, 1);
        let m = fit_sfa(&d).unwrap();
        assert_abs_diff_eq!(m.loadings[(0, 0)], 1.0, epsilon = 1e-10);
        assert_eq!(m.system_count, 1);
    }

    #[test]
    fn features_have_unit_variance_and_sorted_slowness() {
        let d = planted_slow(5, 500, 6);
        let m = fit_sfa(&d).unwrap();
        let s = &d.x * &m.loadings;
        for c in 0..6 {
            let var = s.column(c).norm_squared() / 499.0;
            assert_abs_diff_eq!(var, 1.0, epsilon = 1e-6);
        }
        for c in 1..6 {
            assert!(m.slowness[c] >= m.slowness[c - 1]);
        }
    }

    #[test]
    fn eigenvalues_agree_with_feature_slowness() {
        let d = random_standardized(8, 400, 5);
        let m = fit_sfa(&d).unwrap();
        let s = &d.x * &m.loadings;
        let sdot = &d.xdot * &m.loadings;
        for c in 0..5 {
            let sv: Vec<f64> = s.column(c).iter().copied().collect();
            let dv: Vec<f64> = sdot.column(c).iter().copied().collect();
            let sl = slowness_index(&sv, &dv).unwrap();
            assert_abs_diff_eq!(sl, m.slowness[c], epsilon = 1e-6);
        }
    }

    #[test]
    fn slowest_feature_tracks_planted_driver() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 800;
        let mut z = 0.0f64;
        let mut latent = Vec::with_capacity(n);
        let mut values = DMatrix::zeros(n, 4);
        for r in 0..n {
            z = 0.99 * z + 0.14 * rng.sample::<f64, _>(StandardNormal);
            latent.push(z);
            for c in 0..4 {
                values[(r, c)] = (0.5 + 0.3 * c as f64) * z
                    + 0.3 * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let d = standardized(values);
        let m = fit_sfa(&d).unwrap();
        let s0 = (&d.x * &m.loadings).column(0).clone_owned();
        let lat = DVector::from_vec(latent);
        let lat_c = &lat - DVector::repeat(n, lat.mean());
        let corr = s0.dot(&lat_c) / (s0.norm() * lat_c.norm());
        assert!(corr.abs() > 0.95, "corr={corr}");
        assert!(m.system_count >= 1);
        assert!(m.slowness[0] < 0.1);
    }

    #[test]
    fn white_noise_retains_fewer_than_all_features() {
        let mut below = 0;
        for seed in 0..5 {
            let d = random_standardized(100 + seed, 600, 6);
            let m = fit_sfa(&d).unwrap();
            if m.system_count < 6 {
                below += 1;
            }
        }
        assert!(below >= 4, "system_count hit J in {} of 5 runs", 5 - below);
    }

    #[test]
    fn retained_set_is_a_prefix() {
        for seed in 0..5 {
            let d = planted_slow(40 + seed, 400, 5);
            let m = fit_sfa(&d).unwrap();
            let s = &d.x * &m.loadings;
            let sdot = &d.xdot * &m.loadings;
            let mut threshold = f64::NEG_INFINITY;
            for c in 0..5 {
                let xv: Vec<f64> = d.x.column(c).iter().copied().collect();
                let dv: Vec<f64> = d.xdot.column(c).iter().copied().collect();
                threshold = threshold.max(slowness_index(&xv, &dv).unwrap());
            }
            for c in 0..m.system_count {
                let sv: Vec<f64> = s.column(c).iter().copied().collect();
                let dv: Vec<f64> = sdot.column(c).iter().copied().collect();
                assert!(slowness_index(&sv, &dv).unwrap() <= threshold + 1e-6);
            }
        }
    }

    #[test]
    fn project_replays_training_features() {
        let d = planted_slow(3, 300, 4);
        let m = fit_sfa(&d).unwrap();
        let s = &d.x * &m.loadings;
        for r in [0usize, 1, 150, 299] {
            let x = d.x.row(r).transpose();
            let prev = if r > 0 {
                Some(d.x.row(r - 1).transpose())
            } else {
                None
            };
            let (sys, res) = m.project(&x, prev.as_ref());
            for c in 0..m.system_count {
                assert_abs_diff_eq!(sys.values[c], s[(r, c)], epsilon = 1e-10);
            }
            for c in m.system_count..4 {
                assert_abs_diff_eq!(res.values[c - m.system_count], s[(r, c)], epsilon = 1e-10);
            }
            assert_eq!(sys.temporal.is_some(), r > 0);
        }
    }

    #[test]
    fn statistics_at_origin_and_identity_covariance() {
        let model = SfaModel {
            loadings: DMatrix::identity(3, 3),
            slowness: DVector::from_vec(vec![0.1, 0.5, 1.9]),
            system_count: 2,
            omega_dot_system: DMatrix::identity(2, 2),
            omega_dot_residual: DMatrix::identity(1, 1),
        };
        let zero = model.project(&DVector::zeros(3), None).0;
        assert_eq!(zero.values.norm_squared(), 0.0);

        let sys = FeaturePair {
            values: DVector::from_vec(vec![1.0, 0.0]),
            temporal: Some(DVector::from_vec(vec![0.0, 1.0])),
        };
        let res = FeaturePair {
            values: DVector::from_vec(vec![2.0]),
            temporal: Some(DVector::from_vec(vec![0.0])),
        };
        let stats = model.statistics(&sys, &res).unwrap();
        assert_abs_diff_eq!(stats.t2s, 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(stats.t2f, 4.0, epsilon = 1e-14);
        assert_abs_diff_eq!(stats.d2s.unwrap(), 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(stats.d2f.unwrap(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn identical_consecutive_samples_zero_the_temporal_statistics() {
        let d = planted_slow(7, 300, 4);
        let m = fit_sfa(&d).unwrap();
        let x = d.x.row(10).transpose();
        let (sys, res) = m.project(&x, Some(&x));
        let stats = m.statistics(&sys, &res).unwrap();
        assert_abs_diff_eq!(stats.d2s.unwrap(), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(stats.d2f.unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn training_mean_t2s_is_close_to_system_count() {
        let d = planted_slow(9, 600, 5);
        let m = fit_sfa(&d).unwrap();
        let mut total = 0.0;
        for r in 0..600 {
            let x = d.x.row(r).transpose();
            let (sys, _) = m.project(&x, None);
            total += sys.values.norm_squared();
        }
        let mean = total / 600.0;
        let expect = m.system_count as f64;
        assert!((mean - expect).abs() / expect < 0.05, "mean={mean}");
    }

    #[test]
    fn column_permutation_leaves_slowness_unchanged() {
        let d = planted_slow(12, 400, 5);
        let perm = [3usize, 0, 4, 2, 1];
        let dp = d.select_columns(&perm);
        let m1 = fit_sfa(&d).unwrap();
        let m2 = fit_sfa(&dp).unwrap();
        for c in 0..5 {
            assert_abs_diff_eq!(m1.slowness[c], m2.slowness[c], epsilon = 1e-8);
        }
        assert_eq!(m1.system_count, m2.system_count);
    }
}
