//! Dataset loading, standardization and covariance estimation.
//!
//! All downstream modules work on a [`StandardizedMatrix`]: zero-mean,
//! unit-variance columns together with the first-difference matrix that
//! carries the temporal information.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Serializes a matrix as a nested row-major array so model files stay
/// readable and independent of the linear algebra crate's internal layout.
pub mod mat_serde {
    use nalgebra::DMatrix;
    use serde::de::Error as DeError;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = (0..m.nrows())
            .map(|r| m.row(r).iter().copied().collect())
            .collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(d)?;
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, Vec::len);
        for row in &rows {
            if row.len() != ncols {
                return Err(D::Error::custom("ragged matrix rows"));
            }
        }
        Ok(DMatrix::from_fn(nrows, ncols, |r, c| rows[r][c]))
    }
}

/// Serializes a vector as a plain array.
pub mod vec_serde {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
        let values: Vec<f64> = v.iter().copied().collect();
        values.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
        let values: Vec<f64> = Vec::deserialize(d)?;
        Ok(DVector::from_vec(values))
    }
}

/// Variance below which a column is considered constant and rejected.
pub const CONSTANT_VAR_TOL: f64 = 1e-12;

/// Relative ridge added to the temporal covariance to keep it positive
/// definite: `eps = RIDGE_REL * trace / J`.
pub const RIDGE_REL: f64 = 1e-8;

/// A raw data matrix with named columns. Rows are samples in time order.
#[derive(Debug, Clone)]
pub struct RawDataset {
    pub names: Vec<String>,
    pub values: DMatrix<f64>,
}

impl RawDataset {
    pub fn new(names: Vec<String>, values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() < 3 {
            return Err(Error::data(format!(
                "need at least 3 samples, got {}",
                values.nrows()
            )));
        }
        if values.ncols() < 1 {
            return Err(Error::data("need at least 1 variable"));
        }
        if names.len() != values.ncols() {
            return Err(Error::data(format!(
                "{} column names for {} columns",
                names.len(),
                values.ncols()
            )));
        }
        for j in 0..values.ncols() {
            for i in 0..values.nrows() {
                if !values[(i, j)].is_finite() {
                    return Err(Error::data(format!(
                        "non-finite value at row {}, column {} ({})",
                        i + 2,
                        j + 1,
                        names[j]
                    )));
                }
            }
        }
        Ok(RawDataset { names, values })
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn j(&self) -> usize {
        self.values.ncols()
    }
}

/// Loads a comma-separated file with a header row into a [`RawDataset`].
///
/// Decimal separator is `.`; every data row must have exactly as many fields
/// as the header. Row numbers in errors are 1-based file lines.
pub fn load_csv(path: &Path) -> Result<RawDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;

    let names: Vec<String> = reader
        .headers()
        .map_err(|e| Error::data(format!("{}: bad header: {e}", path.display())))?
        .iter()
        .map(|s| s.to_string())
        .collect();
    if names.is_empty() {
        return Err(Error::data(format!("{}: empty header", path.display())));
    }

    let mut rows: Vec<f64> = Vec::new();
    let mut n = 0usize;
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| {
            Error::data(format!("{}: row {}: {e}", path.display(), i + 2))
        })?;
        if record.len() != names.len() {
            return Err(Error::data(format!(
                "{}: row {}: expected {} fields, got {}",
                path.display(),
                i + 2,
                names.len(),
                record.len()
            )));
        }
        for (j, field) in record.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| {
                Error::data(format!(
                    "{}: row {}, column {} ({}): cannot parse {field:?} as a number",
                    path.display(),
                    i + 2,
                    j + 1,
                    names[j]
                ))
            })?;
            rows.push(v);
        }
        n += 1;
    }

    let values = DMatrix::from_row_slice(n, names.len(), &rows);
    RawDataset::new(names, values)
}

/// Writes a dataset in the same format [`load_csv`] reads. Floats are written
/// with the shortest representation that round-trips.
pub fn write_csv(path: &Path, data: &RawDataset) -> Result<()> {
    let mut writer = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    writer
        .write_record(&data.names)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    for i in 0..data.n() {
        let row: Vec<String> = (0..data.j()).map(|j| data.values[(i, j)].to_string()).collect();
        writer
            .write_record(&row)
            .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    }
    writer
        .flush()
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    Ok(())
}

/// Per-column location and scale fitted on training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    #[serde(with = "vec_serde")]
    pub mean: DVector<f64>,
    #[serde(with = "vec_serde")]
    pub std: DVector<f64>,
}

impl Standardizer {
    /// Number of variables the transform was fitted on.
    pub fn j(&self) -> usize {
        self.mean.len()
    }

    /// Fits means and standard deviations (N-1 denominator). Rejects columns
    /// whose variance is at or below [`CONSTANT_VAR_TOL`].
    pub fn fit(data: &RawDataset) -> Result<Self> {
        let n = data.n();
        let j = data.j();
        let mut mean = DVector::zeros(j);
        let mut std = DVector::zeros(j);
        for c in 0..j {
            let col = data.values.column(c);
            let m = col.sum() / n as f64;
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64;
            if var <= CONSTANT_VAR_TOL {
                return Err(Error::data(format!(
                    "column {} ({}) is constant (variance {var:.3e})",
                    c + 1,
                    data.names[c]
                )));
            }
            mean[c] = m;
            std[c] = var.sqrt();
        }
        Ok(Standardizer { mean, std })
    }

    /// Applies the fitted transform; the column count must match.
    pub fn apply(&self, data: &RawDataset) -> Result<StandardizedMatrix> {
        if data.j() != self.mean.len() {
            return Err(Error::data(format!(
                "standardizer fitted on {} variables, data has {}",
                self.mean.len(),
                data.j()
            )));
        }
        let n = data.n();
        let j = data.j();
        let mut x = DMatrix::zeros(n, j);
        for c in 0..j {
            for r in 0..n {
                x[(r, c)] = (data.values[(r, c)] - self.mean[c]) / self.std[c];
            }
        }
        Ok(StandardizedMatrix::from_x(x))
    }

    /// Standardizes one raw sample (used online by the monitor).
    pub fn apply_sample(&self, raw: &DVector<f64>) -> Result<DVector<f64>> {
        if raw.len() != self.mean.len() {
            return Err(Error::data(format!(
                "standardizer fitted on {} variables, sample has {}",
                self.mean.len(),
                raw.len()
            )));
        }
        Ok(DVector::from_fn(raw.len(), |i, _| {
            (raw[i] - self.mean[i]) / self.std[i]
        }))
    }
}

/// Standardized data plus its temporal first difference.
///
/// `xdot` has one row fewer than `x`: `xdot[n] = x[n+1] - x[n]`.
#[derive(Debug, Clone)]
pub struct StandardizedMatrix {
    pub x: DMatrix<f64>,
    pub xdot: DMatrix<f64>,
}

impl StandardizedMatrix {
    pub fn from_x(x: DMatrix<f64>) -> Self {
        let n = x.nrows();
        let j = x.ncols();
        let mut xdot = DMatrix::zeros(n - 1, j);
        for r in 0..n - 1 {
            for c in 0..j {
                xdot[(r, c)] = x[(r + 1, c)] - x[(r, c)];
            }
        }
        StandardizedMatrix { x, xdot }
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn j(&self) -> usize {
        self.x.ncols()
    }

    /// Column subset, preserving order of `cols`.
    pub fn select_columns(&self, cols: &[usize]) -> StandardizedMatrix {
        StandardizedMatrix {
            x: self.x.select_columns(cols),
            xdot: self.xdot.select_columns(cols),
        }
    }
}

/// Static and temporal covariance estimates of a standardized matrix.
#[derive(Debug, Clone)]
pub struct CovariancePair {
    pub omega: DMatrix<f64>,
    /// Temporal covariance with the ridge already added.
    pub omega_dot: DMatrix<f64>,
    /// The ridge that was added to `omega_dot`.
    pub ridge: f64,
}

/// Sample covariance of the rows of `m`: means subtracted, `rows - 1`
/// denominator.
pub fn sample_cov(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let j = m.ncols();
    assert!(n >= 2, "need at least 2 rows for a covariance");
    let mean = DVector::from_fn(j, |c, _| m.column(c).sum() / n as f64);
    let mut cov = DMatrix::zeros(j, j);
    for r in 0..n {
        for a in 0..j {
            let da = m[(r, a)] - mean[a];
            for b in a..j {
                cov[(a, b)] += da * (m[(r, b)] - mean[b]);
            }
        }
    }
    cov /= (n - 1) as f64;
    for a in 0..j {
        for b in 0..a {
            cov[(a, b)] = cov[(b, a)];
        }
    }
    cov
}

/// Computes the static covariance of `x` and the ridged temporal covariance
/// of `xdot`.
pub fn covariances(data: &StandardizedMatrix) -> CovariancePair {
    let omega = sample_cov(&data.x);
    let mut omega_dot = sample_cov(&data.xdot);
    let j = omega_dot.nrows();
    let ridge = RIDGE_REL * omega_dot.trace() / j as f64;
    for d in 0..j {
        omega_dot[(d, d)] += ridge;
    }
    CovariancePair {
        omega,
        omega_dot,
        ridge,
    }
}
