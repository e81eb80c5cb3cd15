//! Dense symmetric-matrix primitives: banding, the positive-definite band
//! adjustment, eigenvalue extremes, spectral norms and class membership.
//!
//! Everything here works on dense `p x p` storage. The workloads this crate
//! targets keep `p` at a few hundred at most, so `O(p^3)` eigen solves are fine.

use std::fmt;
use std::ops::{Add, Mul, Sub};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Asymmetry (relative to the largest entry) above which construction fails.
const SYMMETRY_TOLERANCE: f64 = 1e-8;

/// A dense real symmetric matrix with finite entries.
///
/// The name reflects how it is used throughout the crate; positive
/// definiteness is not enforced here, since banded sample covariances and
/// differences of covariances are symmetric but indefinite.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct CovarianceMatrix {
    inner: DMatrix<f64>,
}

impl TryFrom<Vec<Vec<f64>>> for CovarianceMatrix {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        let p = rows.len();
        if rows.iter().any(|r| r.len() != p) {
            return Err(Error::invalid("matrix rows must all have length equal to the row count"));
        }
        CovarianceMatrix::new(DMatrix::from_fn(p, p, |i, j| rows[i][j]))
    }
}

impl From<CovarianceMatrix> for Vec<Vec<f64>> {
    fn from(m: CovarianceMatrix) -> Self {
        m.inner.row_iter().map(|r| r.iter().copied().collect()).collect()
    }
}

impl CovarianceMatrix {
    /// Wraps a square matrix, symmetrizing away floating-point drift.
    ///
    /// Entries must be finite. An asymmetry larger than `1e-8` relative to
    /// the largest absolute entry is rejected; anything smaller is averaged out.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::invalid(format!(
                "matrix must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.nrows() == 0 {
            return Err(Error::invalid("matrix must have positive dimension"));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("matrix has non-finite entries"));
        }
        let scale = m.amax().max(f64::MIN_POSITIVE);
        let p = m.nrows();
        let mut asym: f64 = 0.0;
        for j in 0..p {
            for i in (j + 1)..p {
                asym = asym.max((m[(i, j)] - m[(j, i)]).abs());
            }
        }
        if asym > SYMMETRY_TOLERANCE * scale {
            return Err(Error::invalid(format!(
                "matrix is not symmetric (max asymmetry {asym:e})"
            )));
        }
        if asym == 0.0 {
            return Ok(Self { inner: m });
        }
        let sym = (&m + m.transpose()) * 0.5;
        Ok(Self { inner: sym })
    }

    /// Caller guarantees exact symmetry and finiteness.
    pub(crate) fn from_symmetric(inner: DMatrix<f64>) -> Self {
        debug_assert!(inner.is_square());
        Self { inner }
    }

    pub fn identity(p: usize) -> Self {
        Self::from_symmetric(DMatrix::identity(p, p))
    }

    pub fn from_diagonal(diag: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    pub fn from_row_slice(p: usize, entries: &[f64]) -> Result<Self> {
        if entries.len() != p * p {
            return Err(Error::DimensionMismatch {
                expected: p * p,
                found: entries.len(),
            });
        }
        Self::new(DMatrix::from_row_slice(p, p, entries))
    }

    pub fn dim(&self) -> usize {
        self.inner.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.inner
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.inner
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.inner[(i, j)]
    }

    pub fn cholesky(&self) -> Result<Cholesky<f64, Dyn>> {
        Cholesky::new(self.inner.clone()).ok_or(Error::NotPositiveDefinite)
    }

    pub fn is_positive_definite(&self) -> bool {
        Cholesky::new(self.inner.clone()).is_some()
    }

    /// Inverse through a Cholesky factorization; fails unless positive definite.
    pub fn inverse(&self) -> Result<CovarianceMatrix> {
        let inv = self.cholesky()?.inverse();
        Ok(Self::from_symmetric(symmetrize(inv)))
    }

    /// Frobenius norm.
    pub fn frobenius_norm(&self) -> f64 {
        self.inner.norm()
    }

    /// Entrywise average of a nonempty collection of matrices of equal size.
    pub fn mean<'a, I>(items: I) -> Result<CovarianceMatrix>
    where
        I: IntoIterator<Item = &'a CovarianceMatrix>,
    {
        let mut iter = items.into_iter();
        let first = iter
            .next()
            .ok_or_else(|| Error::invalid("cannot average an empty collection"))?;
        let mut acc = first.inner.clone();
        let mut count = 1usize;
        for m in iter {
            if m.dim() != acc.nrows() {
                return Err(Error::DimensionMismatch {
                    expected: acc.nrows(),
                    found: m.dim(),
                });
            }
            acc += &m.inner;
            count += 1;
        }
        acc /= count as f64;
        Ok(Self::from_symmetric(acc))
    }
}

impl fmt::Debug for CovarianceMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CovarianceMatrix{}", self.inner)
    }
}

impl Sub for &CovarianceMatrix {
    type Output = CovarianceMatrix;

    fn sub(self, rhs: &CovarianceMatrix) -> CovarianceMatrix {
        CovarianceMatrix::from_symmetric(&self.inner - &rhs.inner)
    }
}

impl Add for &CovarianceMatrix {
    type Output = CovarianceMatrix;

    fn add(self, rhs: &CovarianceMatrix) -> CovarianceMatrix {
        CovarianceMatrix::from_symmetric(&self.inner + &rhs.inner)
    }
}

impl Mul<f64> for &CovarianceMatrix {
    type Output = CovarianceMatrix;

    fn mul(self, rhs: f64) -> CovarianceMatrix {
        CovarianceMatrix::from_symmetric(&self.inner * rhs)
    }
}

/// Bandwidth `k` for a `p`-dimensional matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BandSpec {
    k: usize,
    p: usize,
}

impl BandSpec {
    pub fn new(k: usize, p: usize) -> Result<Self> {
        if p == 0 {
            return Err(Error::invalid("dimension must be positive"));
        }
        if k > p - 1 {
            return Err(Error::invalid(format!(
                "bandwidth {k} exceeds p - 1 = {}",
                p - 1
            )));
        }
        Ok(Self { k, p })
    }

    /// The bandwidth `k`.
    pub fn bandwidth(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.p
    }

    #[inline]
    pub fn in_band(&self, i: usize, j: usize) -> bool {
        i.abs_diff(j) <= self.k
    }

    fn check(&self, m: &CovarianceMatrix) -> Result<()> {
        if m.dim() != self.p {
            return Err(Error::DimensionMismatch {
                expected: self.p,
                found: m.dim(),
            });
        }
        Ok(())
    }
}

/// Eigenvalue bounds `lower <= lambda_min` and `lambda_max <= upper` of the
/// banded class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassBounds {
    upper: f64,
    lower: f64,
}

impl ClassBounds {
    pub fn new(upper: f64, lower: f64) -> Result<Self> {
        if !(lower > 0.0 && lower <= upper && upper.is_finite()) {
            return Err(Error::invalid(format!(
                "class bounds need 0 < lower <= upper < inf, got lower={lower}, upper={upper}"
            )));
        }
        Ok(Self { upper, lower })
    }

    pub fn upper(&self) -> f64 {
        self.upper
    }

    pub fn lower(&self) -> f64 {
        self.lower
    }
}

/// Zeroes every entry farther than `k` from the diagonal.
pub fn band(m: &CovarianceMatrix, spec: BandSpec) -> Result<CovarianceMatrix> {
    spec.check(m)?;
    Ok(CovarianceMatrix::from_symmetric(band_matrix(m.as_matrix(), spec.k)))
}

pub(crate) fn band_matrix(m: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let p = m.nrows();
    DMatrix::from_fn(p, p, |i, j| if i.abs_diff(j) <= k { m[(i, j)] } else { 0.0 })
}

/// Bands `m` and, if the smallest eigenvalue of the banded matrix falls
/// below `eps`, shifts the diagonal up so that it equals `eps`.
pub fn pd_band_adjust(m: &CovarianceMatrix, spec: BandSpec, eps: f64) -> Result<CovarianceMatrix> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::invalid(format!("eps must be positive, got {eps}")));
    }
    let banded = band(m, spec)?;
    let (lambda_min, _) = extreme_eigenvalues(&banded)?;
    Ok(shift_to_floor(banded, lambda_min, eps))
}

/// Applies the eigenvalue floor to an already banded matrix whose smallest
/// eigenvalue is known.
pub(crate) fn shift_to_floor(banded: CovarianceMatrix, lambda_min: f64, eps: f64) -> CovarianceMatrix {
    // exact comparison, no tolerance
    if lambda_min < eps {
        let mut out = banded.into_matrix();
        let shift = eps - lambda_min;
        for i in 0..out.nrows() {
            out[(i, i)] += shift;
        }
        CovarianceMatrix::from_symmetric(out)
    } else {
        banded
    }
}

/// All eigenvalues in ascending order.
pub fn eigenvalues(m: &CovarianceMatrix) -> Result<Vec<f64>> {
    let values = SymmetricEigen::try_new(m.as_matrix().clone(), f64::EPSILON, 0)
        .ok_or_else(|| Error::numeric("symmetric eigensolver did not converge"))?
        .eigenvalues;
    let mut v: Vec<f64> = values.iter().copied().collect();
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::numeric("non-finite eigenvalue"));
    }
    v.sort_by(f64::total_cmp);
    Ok(v)
}

/// Full eigendecomposition; eigenvalues are not sorted.
pub(crate) fn eigen_decomposition(m: &DMatrix<f64>) -> Result<SymmetricEigen<f64, Dyn>> {
    SymmetricEigen::try_new(m.clone(), f64::EPSILON, 0)
        .ok_or_else(|| Error::numeric("symmetric eigensolver did not converge"))
}

/// `(lambda_min, lambda_max)`.
pub fn extreme_eigenvalues(m: &CovarianceMatrix) -> Result<(f64, f64)> {
    let v = eigenvalues(m)?;
    Ok((v[0], v[v.len() - 1]))
}

/// Largest absolute eigenvalue, i.e. the operator 2-norm of a symmetric matrix.
pub fn spectral_norm(m: &CovarianceMatrix) -> Result<f64> {
    let (lo, hi) = extreme_eigenvalues(m)?;
    Ok(lo.abs().max(hi.abs()))
}

/// Membership in the banded class: exact zeros off the band and eigenvalues
/// inside `[bounds.lower, bounds.upper]`.
pub fn class_membership(m: &CovarianceMatrix, spec: BandSpec, bounds: ClassBounds) -> bool {
    if m.dim() != spec.p || !is_banded(m, spec) {
        return false;
    }
    match extreme_eigenvalues(m) {
        Ok((lo, hi)) => bounds.lower <= lo && hi <= bounds.upper,
        Err(_) => false,
    }
}

/// True when every entry outside the band is exactly zero.
pub fn is_banded(m: &CovarianceMatrix, spec: BandSpec) -> bool {
    let p = m.dim();
    (0..p).all(|j| (0..p).all(|i| spec.in_band(i, j) || m.get(i, j) == 0.0))
}

pub(crate) fn symmetrize(mut m: DMatrix<f64>) -> DMatrix<f64> {
    let p = m.nrows();
    for j in 0..p {
        for i in (j + 1)..p {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

/// `log N(x; 0, L L^T)` given the lower Cholesky factor `L`.
pub(crate) fn gaussian_log_density(chol: &Cholesky<f64, Dyn>, log_det: f64, x: &DVector<f64>) -> f64 {
    let p = x.len() as f64;
    let z = chol
        .l_dirty()
        .solve_lower_triangular(x)
        .expect("cholesky factor has a positive diagonal");
    -0.5 * (p * (2.0 * std::f64::consts::PI).ln() + log_det + z.norm_squared())
}

pub(crate) fn cholesky_log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    let l = chol.l_dirty();
    2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
}
