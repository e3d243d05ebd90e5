//! Small shared linear algebra helpers built on nalgebra.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Symmetric eigendecomposition with eigenvalues sorted descending and each
/// eigenvector's largest-magnitude entry made positive, so results are
/// deterministic.
pub(crate) fn sym_eig_desc(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let j = m.nrows();
    let eig = m.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..j).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .expect("eigenvalues are finite")
    });
    let values = DVector::from_fn(j, |i, _| eig.eigenvalues[order[i]]);
    let mut vectors = DMatrix::zeros(j, j);
    for (i, &o) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(o).clone_owned();
        canonicalize_sign(&mut col);
        vectors.set_column(i, &col);
    }
    (values, vectors)
}

/// Flips a vector so its largest-magnitude entry is positive.
pub(crate) fn canonicalize_sign(v: &mut DVector<f64>) {
    let mut idx = 0;
    let mut best = 0.0;
    for (i, &x) in v.iter().enumerate() {
        if x.abs() > best {
            best = x.abs();
            idx = i;
        }
    }
    if v[idx] < 0.0 {
        *v *= -1.0;
    }
}

/// Symmetric square root `P L^(1/2) P^T` of a positive semidefinite matrix.
pub(crate) fn symmetric_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (values, vectors) = sym_eig_desc(m);
    let scale = values[0].abs().max(1.0);
    let mut roots = DVector::zeros(values.len());
    for i in 0..values.len() {
        if values[i] < -1e-10 * scale {
            return Err(Error::numerical(format!(
                "matrix is not positive semidefinite (eigenvalue {:.3e})",
                values[i]
            )));
        }
        roots[i] = values[i].max(0.0).sqrt();
    }
    let scaled = DMatrix::from_fn(vectors.nrows(), vectors.ncols(), |r, c| {
        vectors[(r, c)] * roots[c]
    });
    Ok(&scaled * vectors.transpose())
}

/// Orthonormal polar factor of a tall or square matrix: `U V^T` from its
/// singular value decomposition.
pub(crate) fn polar_factor(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let svd = m.clone().svd(true, true);
    let u = svd
        .u
        .ok_or_else(|| Error::numerical("singular value decomposition failed"))?;
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::numerical("singular value decomposition failed"))?;
    Ok(&u * &v_t)
}

/// Solves the generalized symmetric eigenproblem `A w = lambda B w` for
/// symmetric `A` and positive definite `B`.
///
/// Returns eigenvalues ascending and eigenvectors as columns, normalized to
/// `w^T B w = 1`.
pub(crate) fn generalized_symmetric_eigen(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let j = a.nrows();
    let chol = b
        .clone()
        .cholesky()
        .ok_or_else(|| Error::numerical("matrix pencil denominator is not positive definite"))?;
    let l = chol.l();
    // C = L^-1 A L^-T, then a standard symmetric problem.
    let t = l
        .solve_lower_triangular(a)
        .ok_or_else(|| Error::numerical("triangular solve failed"))?;
    let c_raw = l
        .solve_lower_triangular(&t.transpose())
        .ok_or_else(|| Error::numerical("triangular solve failed"))?;
    let c = (&c_raw + c_raw.transpose()) * 0.5;

    let (desc_vals, desc_vecs) = sym_eig_desc(&c);
    // Ascending order for slowness use.
    let mut values = DVector::zeros(j);
    let mut vectors = DMatrix::zeros(j, j);
    for i in 0..j {
        let src = j - 1 - i;
        values[i] = desc_vals[src];
        let u = desc_vecs.column(src).clone_owned();
        let w = l
            .transpose()
            .solve_upper_triangular(&u)
            .ok_or_else(|| Error::numerical("triangular solve failed"))?;
        vectors.set_column(i, &w);
    }
    Ok((values, vectors))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn sqrt_of_diagonal() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 1.0]);
        let s = symmetric_sqrt(&m).unwrap();
        assert_abs_diff_eq!(s[(0, 0)], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s[(1, 1)], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s[(0, 1)], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn sqrt_squares_back() {
        let a = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, 0.1, 0.5, 1.5, 0.2, 0.1, 0.2, 1.0]);
        let s = symmetric_sqrt(&a).unwrap();
        let back = &s * s.transpose();
        for r in 0..3 {
            for c in 0..3 {
                assert_abs_diff_eq!(back[(r, c)], a[(r, c)], epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn generalized_eigen_identity_denominator_matches_plain() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]);
        let b = DMatrix::identity(2, 2);
        let (vals, vecs) = generalized_symmetric_eigen(&a, &b).unwrap();
        // Eigenvalues of [[2,1],[1,3]] are (5 +- sqrt(5))/2.
        assert_abs_diff_eq!(vals[0], (5.0 - 5f64.sqrt()) / 2.0, epsilon = 1e-10);
        assert_abs_diff_eq!(vals[1], (5.0 + 5f64.sqrt()) / 2.0, epsilon = 1e-10);
        for i in 0..2 {
            let w = vecs.column(i).clone_owned();
            let residual = &a * &w - &b * &w * vals[i];
            assert_abs_diff_eq!(residual.norm(), 0.0, epsilon = 1e-10);
            assert_abs_diff_eq!(w.dot(&(&b * &w)), 1.0, epsilon = 1e-10);
        }
    }
}
