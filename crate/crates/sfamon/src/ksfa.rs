//! Plant-wide kernel slow feature model over super samples.
//!
//! A super sample concatenates the per-subset system slow features with the
//! remainder variables. A radial-basis kernel model is fitted on those rows
//! in dual form: coefficients minimize the temporal variation of the kernel
//! features subject to (ridge-regularized) unit variance, and the slow /
//! fast split mirrors the linear criterion using kernel diagonal ratios.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{mat_serde, sample_cov, vec_serde, StandardizedMatrix};
use crate::error::{Error, Result};
use crate::linalg::generalized_symmetric_eigen;
use crate::partition::SubsetPartition;
use crate::sfa::{mahalanobis_sq, ridged, slowness_index, FeaturePair, SfaModel, SubsetStats};

/// Regularizer for the unit-variance constraint, scaled by the sample count.
pub const KERNEL_RIDGE: f64 = 1e-6;

/// Relative variance below which a kernel eigen-direction is treated as
/// numerically null and dropped.
const VAR_KEEP_REL: f64 = 1e-8;

/// Relative eigenvalue threshold deciding which kernel directions count as
/// significant spectrum; duals are restricted to that subspace.
const RANK_REL: f64 = 1e-7;

/// Fraction of the centered kernel's positive spectrum kept when restricting
/// the duals. The spectral tail describes directions the kernel barely
/// resolves; features built on it interpolate the training set instead of
/// generalizing, which inflates held-out statistics.
const SPECTRUM_KEEP: f64 = 0.999;

/// How the kernel bandwidth is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum GammaRule {
    /// `gamma = 1 / (2 * median^2)` of pairwise training distances.
    Median,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsfaConfig {
    pub gamma: GammaRule,
}

impl Default for KsfaConfig {
    fn default() -> Self {
        KsfaConfig {
            gamma: GammaRule::Median,
        }
    }
}

/// Double-centered kernel matrices of a training block, together with the
/// centering statistics needed to center test kernel vectors later.
#[derive(Debug, Clone)]
pub struct CenteredKernel {
    /// N x N centered kernel.
    pub ktilde: DMatrix<f64>,
    /// (N-1) x (N-1) kernel of the first-differenced feature maps.
    pub kdot_tilde: DMatrix<f64>,
    /// Row means of the uncentered kernel.
    pub row_means: DVector<f64>,
    /// Grand mean of the uncentered kernel.
    pub total_mean: f64,
    /// Set when the centered kernel is numerically zero (bandwidth so wide
    /// that every sample looks identical).
    pub degenerate_bandwidth: bool,
}

/// Fitted kernel model. Projection of a new super sample `x` is
/// `s = alphas^T ktilde(x)` where `ktilde(x)` is the test kernel vector
/// centered against the stored training means.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KsfaModel {
    #[serde(with = "mat_serde")]
    pub train_supers: DMatrix<f64>,
    pub kernel: String,
    pub gamma: f64,
    /// Row means of the uncentered training kernel (symmetric, so row and
    /// column means coincide).
    #[serde(with = "vec_serde")]
    pub row_means: DVector<f64>,
    pub total_mean: f64,
    /// N x totalFeatures dual coefficients; the first `m_sp` columns are the
    /// system (slow) features.
    #[serde(with = "mat_serde")]
    pub alphas: DMatrix<f64>,
    pub m_sp: usize,
    pub total_features: usize,
    /// Training slowness of each retained feature, ascending.
    #[serde(with = "vec_serde")]
    pub slowness: DVector<f64>,
    #[serde(with = "mat_serde")]
    pub omega_dot_system: DMatrix<f64>,
    #[serde(with = "mat_serde")]
    pub omega_dot_residual: DMatrix<f64>,
    pub ridge: f64,
    pub degenerate_bandwidth: bool,
}

/// Builds the N x (sum M_k + |sdnl|) super-sample matrix: per-subset system
/// slow features in partition order, then the remainder variables.
pub fn build_super_samples(
    partition: &SubsetPartition,
    subset_models: &[SfaModel],
    data: &StandardizedMatrix,
) -> Result<DMatrix<f64>> {
    if partition.sdl.len() != subset_models.len() {
        return Err(Error::data(format!(
            "{} subsets but {} subset models",
            partition.sdl.len(),
            subset_models.len()
        )));
    }
    let n = data.n();
    let j = data.j();
    let mut blocks: Vec<DMatrix<f64>> = Vec::new();
    for (vars, model) in partition.sdl.iter().zip(subset_models) {
        if vars.iter().any(|&v| v >= j) {
            return Err(Error::data("subset variable index out of range"));
        }
        if model.j() != vars.len() {
            return Err(Error::data(format!(
                "subset model covers {} variables, subset has {}",
                model.j(),
                vars.len()
            )));
        }
        let x_sub = data.x.select_columns(vars);
        let system = model.loadings.columns(0, model.system_count);
        blocks.push(&x_sub * system);
    }
    if partition.sdnl.iter().any(|&v| v >= j) {
        return Err(Error::data("remainder variable index out of range"));
    }
    if !partition.sdnl.is_empty() {
        blocks.push(data.x.select_columns(&partition.sdnl));
    }

    let width: usize = blocks.iter().map(|b| b.ncols()).sum();
    if width == 0 {
        return Err(Error::data("super samples would have zero width"));
    }
    let mut out = DMatrix::zeros(n, width);
    let mut col = 0;
    for b in blocks {
        out.view_mut((0, col), (n, b.ncols())).copy_from(&b);
        col += b.ncols();
    }
    Ok(out)
}

fn rbf_row(train: &DMatrix<f64>, x: &DVector<f64>, gamma: f64) -> DVector<f64> {
    DVector::from_fn(train.nrows(), |i, _| {
        let mut d2 = 0.0;
        for c in 0..train.ncols() {
            let d = train[(i, c)] - x[c];
            d2 += d * d;
        }
        (-gamma * d2).exp()
    })
}

/// Radial-basis kernel on the rows of `train`, double-centered, plus the
/// kernel of the first-differenced feature maps.
pub fn centered_kernel(train: &DMatrix<f64>, gamma: f64) -> Result<CenteredKernel> {
    if !(gamma > 0.0) {
        return Err(Error::data(format!("kernel gamma must be positive, got {gamma}")));
    }
    let n = train.nrows();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = 1.0;
        for jdx in i + 1..n {
            let mut d2 = 0.0;
            for c in 0..train.ncols() {
                let d = train[(i, c)] - train[(jdx, c)];
                d2 += d * d;
            }
            let v = (-gamma * d2).exp();
            k[(i, jdx)] = v;
            k[(jdx, i)] = v;
        }
    }
    let row_means = DVector::from_fn(n, |i, _| k.row(i).sum() / n as f64);
    let total_mean = row_means.sum() / n as f64;
    let ktilde = DMatrix::from_fn(n, n, |i, jdx| {
        k[(i, jdx)] - row_means[i] - row_means[jdx] + total_mean
    });
    let degenerate = ktilde.amax() < 1e-10;
    // Difference on both sides: entry (i, j) is the kernel of the i-th and
    // j-th first-differenced feature maps.
    let kdot_tilde = DMatrix::from_fn(n - 1, n - 1, |i, jdx| {
        ktilde[(i + 1, jdx + 1)] - ktilde[(i + 1, jdx)] - ktilde[(i, jdx + 1)] + ktilde[(i, jdx)]
    });
    Ok(CenteredKernel {
        ktilde,
        kdot_tilde,
        row_means,
        total_mean,
        degenerate_bandwidth: degenerate,
    })
}

/// Median of pairwise Euclidean distances between rows.
fn median_pairwise_distance(train: &DMatrix<f64>) -> Result<f64> {
    let n = train.nrows();
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for jdx in i + 1..n {
            let mut d2 = 0.0;
            for c in 0..train.ncols() {
                let d = train[(i, c)] - train[(jdx, c)];
                d2 += d * d;
            }
            dists.push(d2.sqrt());
        }
    }
    dists.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let mid = dists.len() / 2;
    let median = if dists.len() % 2 == 0 {
        0.5 * (dists[mid - 1] + dists[mid])
    } else {
        dists[mid]
    };
    if median <= 1e-300 {
        return Err(Error::numerical(
            "median pairwise distance is zero; kernel bandwidth undefined",
        ));
    }
    Ok(median)
}

/// Number of leading features whose slowness stays at or below the
/// threshold; the retained set is always a prefix.
pub(crate) fn prefix_count(slowness: &[f64], threshold: f64) -> usize {
    slowness.iter().take_while(|&&s| s <= threshold).count()
}

/// Fits the kernel slow feature model on training super samples.
pub fn fit_ksfa(train_supers: &DMatrix<f64>, cfg: &KsfaConfig) -> Result<KsfaModel> {
    let n = train_supers.nrows();
    if n < 10 {
        return Err(Error::data(format!(
            "need at least 10 samples for a kernel model, got {n}"
        )));
    }
    if train_supers.ncols() == 0 {
        return Err(Error::data("super samples have zero width"));
    }
    if train_supers.iter().any(|v| !v.is_finite()) {
        return Err(Error::data("super samples must be finite"));
    }

    let gamma = match cfg.gamma {
        GammaRule::Fixed(g) => {
            if !(g > 0.0) {
                return Err(Error::data(format!(
                    "kernel gamma must be positive, got {g}"
                )));
            }
            g
        }
        GammaRule::Median => {
            let med = median_pairwise_distance(train_supers)?;
            1.0 / (2.0 * med * med)
        }
    };

    let centered = centered_kernel(train_supers, gamma)?;
    let ktilde = &centered.ktilde;

    // Restrict the duals to the kernel eigendirections carrying nearly all
    // of the positive spectrum. The centered kernel is positive semidefinite
    // up to roundoff, so negative or near-zero eigenvalues are numerical
    // noise, and the low-energy positive tail only supports interpolating
    // features that fail to generalize.
    let se = ktilde.clone().symmetric_eigen();
    let max_abs = se.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut order: Vec<usize> = (0..n)
        .filter(|&i| se.eigenvalues[i] > RANK_REL * max_abs.max(1e-300))
        .collect();
    order.sort_by(|&a, &b| {
        se.eigenvalues[b]
            .partial_cmp(&se.eigenvalues[a])
            .expect("finite eigenvalues")
    });
    let spectrum_total: f64 = order.iter().map(|&i| se.eigenvalues[i]).sum();
    let mut keep_idx = Vec::new();
    let mut spectrum_acc = 0.0;
    for &i in &order {
        spectrum_acc += se.eigenvalues[i];
        keep_idx.push(i);
        if spectrum_acc >= SPECTRUM_KEEP * spectrum_total {
            break;
        }
    }
    let rank = keep_idx.len();
    if rank < 2 {
        return Err(Error::numerical(
            "centered kernel has no significant spectrum; bandwidth degenerate",
        ));
    }
    let u_r = se.eigenvectors.select_columns(&keep_idx);
    let lam_r = DVector::from_fn(rank, |i, _| se.eigenvalues[keep_idx[i]]);

    // In that basis the pencil becomes small and well conditioned:
    // K~ U = U L, so A_r = (D K~ U)^T (D K~ U) with D the row differencer,
    // and B_r = U^T (K~ K~ + ridge I) U = L^2 + ridge I is diagonal.
    let ku = &u_r * DMatrix::from_diagonal(&lam_r);
    let dku = DMatrix::from_fn(n - 1, rank, |r, c| ku[(r + 1, c)] - ku[(r, c)]);
    let a_r = dku.tr_mul(&dku);
    let ridge = KERNEL_RIDGE * n as f64;
    let mut b_r = DMatrix::zeros(rank, rank);
    for d in 0..rank {
        b_r[(d, d)] = lam_r[d] * lam_r[d] + ridge;
    }
    let (_, betas) = generalized_symmetric_eigen(&a_r, &b_r)?;
    let vectors = &u_r * betas;
    let cap = rank.saturating_sub(1);

    let s_full = ktilde * &vectors;
    let mut kept: Vec<(usize, f64, f64)> = Vec::new(); // (column, variance, slowness)
    let mut max_var = 0.0f64;
    for c in 0..s_full.ncols() {
        let var = s_full.column(c).norm_squared() / (n as f64 - 1.0);
        max_var = max_var.max(var);
    }
    for c in 0..s_full.ncols() {
        let var = s_full.column(c).norm_squared() / (n as f64 - 1.0);
        if var > VAR_KEEP_REL * max_var && var > 0.0 {
            let s: Vec<f64> = s_full.column(c).iter().copied().collect();
            let sdot: Vec<f64> = (0..n - 1)
                .map(|r| s_full[(r + 1, c)] - s_full[(r, c)])
                .collect();
            let sl = slowness_index(&s, &sdot)?;
            kept.push((c, var, sl));
        }
    }
    kept.sort_by(|x, y| x.2.partial_cmp(&y.2).expect("finite slowness"));
    kept.truncate(cap);
    if kept.is_empty() {
        return Err(Error::numerical(
            "degenerate feature split: no usable kernel features",
        ));
    }

    let total_features = kept.len();
    let mut alphas = DMatrix::zeros(n, total_features);
    let mut slowness = DVector::zeros(total_features);
    for (out_c, (c, var, sl)) in kept.iter().enumerate() {
        let scale = var.sqrt();
        for r in 0..n {
            alphas[(r, out_c)] = vectors[(r, *c)] / scale;
        }
        slowness[out_c] = *sl;
    }

    // Slow/fast split: threshold from kernel diagonal ratios, mirroring the
    // per-variable criterion of the linear model.
    let mut threshold = f64::NEG_INFINITY;
    for jdx in 0..n - 1 {
        let denom = ktilde[(jdx, jdx)];
        if denom > 1e-12 * max_abs.max(1e-300) {
            threshold = threshold.max(centered.kdot_tilde[(jdx, jdx)] / denom);
        }
    }
    if !threshold.is_finite() {
        return Err(Error::numerical(
            "degenerate feature split: kernel diagonal carries no variance",
        ));
    }
    let slow_vec: Vec<f64> = slowness.iter().copied().collect();
    let m_sp = prefix_count(&slow_vec, threshold);
    if m_sp == 0 {
        return Err(Error::numerical(
            "degenerate feature split: every kernel feature is faster than the threshold",
        ));
    }

    let s_train = ktilde * &alphas;
    let sdot_train = DMatrix::from_fn(n - 1, total_features, |r, c| {
        s_train[(r + 1, c)] - s_train[(r, c)]
    });
    let omega_dot_system = ridged(sample_cov(&sdot_train.columns(0, m_sp).clone_owned()));
    let omega_dot_residual = ridged(sample_cov(
        &sdot_train.columns(m_sp, total_features - m_sp).clone_owned(),
    ));

    Ok(KsfaModel {
        train_supers: train_supers.clone(),
        kernel: "radial-basis".to_string(),
        gamma,
        row_means: centered.row_means,
        total_mean: centered.total_mean,
        alphas,
        m_sp,
        total_features,
        slowness,
        omega_dot_system,
        omega_dot_residual,
        ridge: KERNEL_RIDGE,
        degenerate_bandwidth: centered.degenerate_bandwidth,
    })
}

impl KsfaModel {
    pub fn n(&self) -> usize {
        self.train_supers.nrows()
    }

    pub fn width(&self) -> usize {
        self.train_supers.ncols()
    }

    /// Centered test kernel vector against the training block.
    fn centered_test_row(&self, x: &DVector<f64>) -> DVector<f64> {
        let k = rbf_row(&self.train_supers, x, self.gamma);
        let mean = k.sum() / k.len() as f64;
        DVector::from_fn(k.len(), |i, _| k[i] - mean - self.row_means[i] + self.total_mean)
    }

    /// Projects one super sample (and optionally its predecessor for the
    /// temporal part) onto the system and residual kernel features.
    pub fn project(
        &self,
        x: &DVector<f64>,
        x_prev: Option<&DVector<f64>>,
    ) -> Result<(FeaturePair, FeaturePair)> {
        if x.len() != self.width() {
            return Err(Error::data(format!(
                "super sample has {} entries, model expects {}",
                x.len(),
                self.width()
            )));
        }
        if let Some(p) = x_prev {
            if p.len() != self.width() {
                return Err(Error::data(format!(
                    "previous super sample has {} entries, model expects {}",
                    p.len(),
                    self.width()
                )));
            }
        }
        let s = self.alphas.tr_mul(&self.centered_test_row(x));
        let sdot = x_prev.map(|p| &s - self.alphas.tr_mul(&self.centered_test_row(p)));
        let m = self.m_sp;
        let rest = self.total_features - m;
        let system = FeaturePair {
            values: s.rows(0, m).clone_owned(),
            temporal: sdot.as_ref().map(|d| d.rows(0, m).clone_owned()),
        };
        let residual = FeaturePair {
            values: s.rows(m, rest).clone_owned(),
            temporal: sdot.as_ref().map(|d| d.rows(m, rest).clone_owned()),
        };
        Ok((system, residual))
    }

    /// Monitoring statistics of projected features, mirroring the subset
    /// model contract: static T-squared on each group, temporal D-squared
    /// against the training temporal covariance.
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

    /// Training features: row n holds the feature values of training sample n.
    pub fn training_features(&self) -> DMatrix<f64> {
        // ktilde * alphas, rebuilt from stored state.
        let n = self.n();
        let mut ktilde = DMatrix::zeros(n, n);
        for i in 0..n {
            let x = self.train_supers.row(i).transpose();
            let col = self.centered_test_row(&x);
            ktilde.column_mut(i).copy_from(&col);
        }
        ktilde.tr_mul(&self.alphas)
    }
}
