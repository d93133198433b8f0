//! Empirical statistics, PCA whitening and whitened-norm scoring.
//!
//! Everything here is a pure function over immutable inputs. Sample sets are
//! passed as slices of anything that derefs to `[f64]`, one entry per sample.
//!
//! The spectrum of a layer can be obtained two ways: by decomposing the dense
//! `d x d` covariance, or by decomposing the `N x N` Gram matrix of the
//! centered samples and mapping its eigenvectors back to feature space. The
//! second route never materializes the covariance and is what
//! [`fit_statistics`] uses whenever `N <= d`, which is the normal case for
//! LLM hidden states (a few dozen samples, thousands of dimensions).

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Eigenvalues below `lambda_1` times this factor are floored before the
/// inverse square root is taken.
pub const DEFAULT_EIGENVALUE_FLOOR: f64 = 1e-6;

/// Relative ridge added by [`mahalanobis_direct`] when the covariance is not
/// positive definite.
pub const ORACLE_RIDGE: f64 = 1e-6;

const SYMMETRY_TOLERANCE: f64 = 1e-8;

/// A single layer's hidden-state vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationVector {
    layer: usize,
    values: Vec<f64>,
}

impl ActivationVector {
    pub fn new(layer: usize, values: Vec<f64>) -> Result<Self> {
        if layer == 0 {
            return Err(Error::Configuration("layer indices start at 1".into()));
        }
        if values.is_empty() {
            return Err(Error::EmptyData("activation vector has no entries".into()));
        }
        check_finite(&values)?;
        Ok(Self { layer, values })
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

impl AsRef<[f64]> for ActivationVector {
    fn as_ref(&self) -> &[f64] {
        &self.values
    }
}

pub(crate) fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFiniteInput { index }),
        None => Ok(()),
    }
}

/// Validates a sample set and returns its common dimension.
fn sample_dim<S: AsRef<[f64]>>(samples: &[S]) -> Result<usize> {
    let first = samples
        .first()
        .ok_or_else(|| Error::EmptyData("no samples".into()))?;
    let d = first.as_ref().len();
    if d == 0 {
        return Err(Error::EmptyData("samples have dimension 0".into()));
    }
    for s in samples {
        let s = s.as_ref();
        if s.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                actual: s.len(),
            });
        }
    }
    Ok(d)
}

pub fn compute_mean<S: AsRef<[f64]>>(samples: &[S]) -> Result<DVector<f64>> {
    let d = sample_dim(samples)?;
    let mut mean = DVector::zeros(d);
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s.as_ref()) {
            *m += v;
        }
    }
    mean /= samples.len() as f64;
    Ok(mean)
}

/// Rows are `x_i - mean`.
fn centered_matrix<S: AsRef<[f64]>>(samples: &[S], mean: &DVector<f64>) -> DMatrix<f64> {
    let d = mean.len();
    DMatrix::from_fn(samples.len(), d, |i, j| samples[i].as_ref()[j] - mean[j])
}

/// Unbiased sample covariance (denominator `N - 1`).
pub fn compute_covariance<S: AsRef<[f64]>>(
    samples: &[S],
    mean: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let d = sample_dim(samples)?;
    if mean.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: mean.len(),
        });
    }
    let n = samples.len();
    if n < 2 {
        return Err(Error::InsufficientData { needed: 2, got: n });
    }
    let centered = centered_matrix(samples, mean);
    let mut cov = centered.tr_mul(&centered);
    cov /= (n - 1) as f64;
    // tr_mul is symmetric up to rounding; make it exact.
    cov = (&cov + cov.transpose()) * 0.5;
    Ok(cov)
}

/// Eigenpairs sorted by nonincreasing eigenvalue.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub eigenvalues: DVector<f64>,
    /// One eigenvector per column.
    pub eigenvectors: DMatrix<f64>,
}

/// Full eigendecomposition of a symmetric matrix.
///
/// Eigenvectors are sign-normalized so that the entry of largest magnitude is
/// positive (ties go to the lowest index), which makes results reproducible
/// across runs and platforms with the same solver.
pub fn eigendecompose(matrix: &DMatrix<f64>) -> Result<Spectrum> {
    let (rows, cols) = matrix.shape();
    if rows != cols {
        return Err(Error::Numeric(format!(
            "eigendecomposition needs a square matrix, got {rows}x{cols}"
        )));
    }
    if rows == 0 {
        return Err(Error::EmptyData("empty matrix".into()));
    }
    check_finite(matrix.as_slice())?;
    let scale = matrix.amax().max(1.0);
    for i in 0..rows {
        for j in (i + 1)..cols {
            let gap = (matrix[(i, j)] - matrix[(j, i)]).abs();
            if gap > SYMMETRY_TOLERANCE * scale {
                return Err(Error::Numeric(format!(
                    "matrix is not symmetric at ({i}, {j}): |a_ij - a_ji| = {gap:e}"
                )));
            }
        }
    }

    let eig = SymmetricEigen::new(matrix.clone());
    let mut order: Vec<usize> = (0..rows).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let eigenvalues = DVector::from_iterator(rows, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut eigenvectors = eig.eigenvectors.select_columns(&order);
    normalize_signs(&mut eigenvectors);
    Ok(Spectrum {
        eigenvalues,
        eigenvectors,
    })
}

fn normalize_signs(vectors: &mut DMatrix<f64>) {
    for mut col in vectors.column_iter_mut() {
        let mut best = 0;
        for (i, v) in col.iter().enumerate() {
            if v.abs() > col[best].abs() {
                best = i;
            }
        }
        if col[best] < 0.0 {
            col.neg_mut();
        }
    }
}

/// Mean and leading covariance eigenpairs of one layer's in-policy samples.
///
/// Only eigenpairs above numerical rank are kept, so `rank() <= min(d, N - 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStatistics {
    pub mean: DVector<f64>,
    pub eigenvalues: DVector<f64>,
    pub eigenvectors: DMatrix<f64>,
    pub sample_count: usize,
}

impl LayerStatistics {
    /// Builds statistics from an explicit covariance matrix.
    pub fn from_covariance(
        mean: DVector<f64>,
        covariance: &DMatrix<f64>,
        sample_count: usize,
    ) -> Result<Self> {
        if covariance.nrows() != mean.len() {
            return Err(Error::DimensionMismatch {
                expected: mean.len(),
                actual: covariance.nrows(),
            });
        }
        let spectrum = eigendecompose(covariance)?;
        let d = mean.len();
        let max_rank = if sample_count >= 2 {
            d.min(sample_count - 1)
        } else {
            d
        };
        let rank = numerical_rank(&spectrum.eigenvalues, d.max(sample_count), max_rank);
        Ok(Self {
            mean,
            eigenvalues: spectrum.eigenvalues.rows(0, rank).into_owned(),
            eigenvectors: spectrum.eigenvectors.columns(0, rank).into_owned(),
            sample_count,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn rank(&self) -> usize {
        self.eigenvalues.len()
    }
}

fn numerical_rank(eigenvalues: &DVector<f64>, size: usize, max_rank: usize) -> usize {
    let Some(&top) = eigenvalues.as_slice().first() else {
        return 0;
    };
    if top <= 0.0 {
        return 0;
    }
    let tol = top * size as f64 * f64::EPSILON * 64.0;
    eigenvalues
        .iter()
        .take(max_rank)
        .take_while(|&&v| v > tol)
        .count()
}

/// Fits layer statistics, choosing the Gram route when `N <= d`.
pub fn fit_statistics<S: AsRef<[f64]>>(samples: &[S]) -> Result<LayerStatistics> {
    let d = sample_dim(samples)?;
    if samples.len() <= d {
        fit_statistics_gram(samples)
    } else {
        fit_statistics_dense(samples)
    }
}

/// Spectrum from the dense `d x d` covariance.
pub fn fit_statistics_dense<S: AsRef<[f64]>>(samples: &[S]) -> Result<LayerStatistics> {
    let mean = compute_mean(samples)?;
    let cov = compute_covariance(samples, &mean)?;
    LayerStatistics::from_covariance(mean, &cov, samples.len())
}

/// Spectrum from the `N x N` Gram matrix of centered samples.
///
/// With `X` the centered `N x d` data, `X X^T / (N-1)` shares its nonzero
/// eigenvalues with the covariance, and each Gram eigenvector `u` maps to the
/// covariance eigenvector `X^T u / sqrt((N-1) lambda)`.
pub fn fit_statistics_gram<S: AsRef<[f64]>>(samples: &[S]) -> Result<LayerStatistics> {
    let d = sample_dim(samples)?;
    let n = samples.len();
    if n < 2 {
        return Err(Error::InsufficientData { needed: 2, got: n });
    }
    let mean = compute_mean(samples)?;
    let centered = centered_matrix(samples, &mean);
    let denom = (n - 1) as f64;
    let mut gram = &centered * centered.transpose();
    gram /= denom;
    gram = (&gram + gram.transpose()) * 0.5;

    let spectrum = eigendecompose(&gram)?;
    let rank = numerical_rank(&spectrum.eigenvalues, d.max(n), d.min(n - 1));
    let eigenvalues = spectrum.eigenvalues.rows(0, rank).into_owned();
    let mut eigenvectors = centered.tr_mul(&spectrum.eigenvectors.columns(0, rank));
    for (mut col, &lambda) in eigenvectors.column_iter_mut().zip(eigenvalues.iter()) {
        col /= (denom * lambda).sqrt();
    }
    normalize_signs(&mut eigenvectors);
    Ok(LayerStatistics {
        mean,
        eigenvalues,
        eigenvectors,
        sample_count: n,
    })
}

/// Top-k PCA whitening: `y = W (x - mean)` with rows of `W` equal to
/// `lambda_i^{-1/2} v_i^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct WhiteningTransform {
    pub mean: DVector<f64>,
    /// `k x d`.
    pub matrix: DMatrix<f64>,
    /// Absolute floor applied to the eigenvalues before inversion.
    pub eigenvalue_floor: f64,
}

pub fn build_whitening(stats: &LayerStatistics, k: usize) -> Result<WhiteningTransform> {
    build_whitening_with_floor(stats, k, DEFAULT_EIGENVALUE_FLOOR)
}

/// Like [`build_whitening`] with an explicit floor relative to the top
/// eigenvalue.
pub fn build_whitening_with_floor(
    stats: &LayerStatistics,
    k: usize,
    relative_floor: f64,
) -> Result<WhiteningTransform> {
    if !(relative_floor > 0.0 && relative_floor.is_finite()) {
        return Err(Error::Configuration(format!(
            "eigenvalue floor must be positive, got {relative_floor}"
        )));
    }
    let top = stats.eigenvalues.as_slice().first().copied().unwrap_or(0.0);
    if top <= 0.0 {
        return Err(Error::DegenerateData(
            "covariance is zero (all samples identical)".into(),
        ));
    }
    if k == 0 || k > stats.rank() {
        return Err(Error::Configuration(format!(
            "k = {k} must be in 1..={} (covariance rank)",
            stats.rank()
        )));
    }
    let floor = relative_floor * top;
    let d = stats.dim();
    let mut matrix = DMatrix::zeros(k, d);
    for i in 0..k {
        let scale = stats.eigenvalues[i].max(floor).sqrt().recip();
        let v = stats.eigenvectors.column(i);
        for j in 0..d {
            matrix[(i, j)] = v[j] * scale;
        }
    }
    Ok(WhiteningTransform {
        mean: stats.mean.clone(),
        matrix,
        eigenvalue_floor: floor,
    })
}

impl WhiteningTransform {
    pub fn k(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: x.len(),
            });
        }
        Ok(())
    }

    pub fn whiten(&self, x: &[f64]) -> Result<DVector<f64>> {
        self.check_dim(x)?;
        let centered = DVector::from_iterator(
            x.len(),
            x.iter().zip(self.mean.iter()).map(|(a, m)| a - m),
        );
        Ok(&self.matrix * centered)
    }

    /// Euclidean norm of the whitened vector.
    pub fn score(&self, x: &[f64]) -> Result<f64> {
        Ok(self.whiten(x)?.norm())
    }

    /// Standard-normal log density of the whitened vector in `k` dimensions.
    pub fn log_likelihood(&self, x: &[f64]) -> Result<f64> {
        let s = self.score(x)?;
        Ok(gaussian_log_likelihood(s, self.k()))
    }

    /// Rounds every parameter to the nearest `f32`, the on-disk precision.
    pub fn to_storage_precision(&self) -> Self {
        let round = |v: f64| v as f32 as f64;
        Self {
            mean: self.mean.map(round),
            matrix: self.matrix.map(round),
            eigenvalue_floor: self.eigenvalue_floor,
        }
    }
}

/// `-(k/2) ln(2 pi) - s^2 / 2`.
pub fn gaussian_log_likelihood(score: f64, k: usize) -> f64 {
    -0.5 * k as f64 * (2.0 * std::f64::consts::PI).ln() - 0.5 * score * score
}

/// Squared Mahalanobis distance `(x - mean)^T cov^{-1} (x - mean)` by direct
/// Cholesky solve.
///
/// This never touches the eigendecomposition and is the reference that
/// whitened scores are checked against. If `cov` is not positive definite a
/// ridge of `1e-6 * trace / d` is added once before giving up.
pub fn mahalanobis_direct(mean: &DVector<f64>, cov: &DMatrix<f64>, x: &[f64]) -> Result<f64> {
    let d = mean.len();
    if cov.shape() != (d, d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: cov.nrows(),
        });
    }
    if x.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: x.len(),
        });
    }
    let diff = DVector::from_iterator(d, x.iter().zip(mean.iter()).map(|(a, m)| a - m));
    let chol = match cov.clone().cholesky() {
        Some(c) => c,
        None => {
            let eps = ORACLE_RIDGE * cov.trace() / d as f64;
            let ridged = cov + DMatrix::identity(d, d) * eps;
            ridged.cholesky().ok_or_else(|| {
                Error::Numeric("covariance is singular even after ridge regularization".into())
            })?
        }
    };
    let solved = chol.solve(&diff);
    Ok(diff.dot(&solved).max(0.0))
}
