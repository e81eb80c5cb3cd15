//! Seeded random generation: Gaussian data, Wishart and inverse-Wishart draws
//! through the Bartlett decomposition, and inverse-Wishart log densities.
//!
//! Inverse-Wishart parameters follow the convention in which the density is
//! proportional to `|S|^{-df/2} exp{-tr(S^{-1} scale)/2}`. The conventional
//! degrees of freedom are `df - p - 1`; [`IwParams::standard_df`] is the only
//! place that conversion happens.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::linalg::{cholesky_log_det, CovarianceMatrix};

/// Identifies one reproducible random stream.
///
/// Streams are ChaCha8 keyed by `root_seed` with the 64-bit stream counter set
/// to `stream_index`, so distinct indices never share output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedSpec {
    pub root_seed: u64,
    pub stream_index: u64,
}

impl SeedSpec {
    pub fn new(root_seed: u64) -> Self {
        Self {
            root_seed,
            stream_index: 0,
        }
    }

    pub fn with_stream(root_seed: u64, stream_index: u64) -> Self {
        Self {
            root_seed,
            stream_index,
        }
    }

    /// Derives the substream numbered `index` below this one. The derived
    /// index depends only on `(self, index)`, never on evaluation order.
    pub fn child(&self, index: u64) -> SeedSpec {
        let mixed = splitmix64(self.stream_index ^ splitmix64(index.wrapping_add(0x5851_f42d_4c95_7f2d)));
        SeedSpec {
            root_seed: self.root_seed,
            stream_index: mixed,
        }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.root_seed);
        rng.set_stream(self.stream_index);
        rng
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `n` observations of a `p`-dimensional vector, one per row.
#[derive(Clone, Debug, PartialEq)]
pub struct DataMatrix {
    rows: DMatrix<f64>,
}

impl DataMatrix {
    pub fn new(rows: DMatrix<f64>) -> Result<Self> {
        if rows.nrows() == 0 || rows.ncols() == 0 {
            return Err(Error::invalid("data matrix needs at least one row and column"));
        }
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("data matrix has non-finite entries".into()));
        }
        Ok(Self { rows })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::invalid("data matrix needs at least one row"));
        }
        let p = rows[0].len();
        if let Some(bad) = rows.iter().find(|r| r.len() != p) {
            return Err(Error::DimensionMismatch {
                expected: p,
                found: bad.len(),
            });
        }
        Self::new(DMatrix::from_fn(n, p, |i, j| rows[i][j]))
    }

    pub fn n(&self) -> usize {
        self.rows.nrows()
    }

    pub fn p(&self) -> usize {
        self.rows.ncols()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.rows
    }

    /// Observation `i` as a column vector.
    pub fn row(&self, i: usize) -> DVector<f64> {
        self.rows.row(i).transpose()
    }

    /// All observations except row `i`; `None` when that leaves nothing.
    pub fn without_row(&self, i: usize) -> Option<DataMatrix> {
        if self.n() <= 1 {
            return None;
        }
        Some(DataMatrix {
            rows: self.rows.clone().remove_row(i),
        })
    }

    /// Rows `start..end`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<DataMatrix> {
        if start >= end || end > self.n() {
            return Err(Error::invalid(format!("bad row range {start}..{end}")));
        }
        Ok(DataMatrix {
            rows: self.rows.rows(start, end - start).into_owned(),
        })
    }

    /// `sum_i x_i x_i^T`.
    pub fn scatter(&self) -> DMatrix<f64> {
        self.rows.tr_mul(&self.rows)
    }
}

/// Inverse-Wishart parameters `(scale, df)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawIwParams")]
pub struct IwParams {
    scale: CovarianceMatrix,
    df: f64,
}

#[derive(Deserialize)]
struct RawIwParams {
    scale: CovarianceMatrix,
    df: f64,
}

impl TryFrom<RawIwParams> for IwParams {
    type Error = Error;

    fn try_from(raw: RawIwParams) -> Result<Self> {
        IwParams::new(raw.scale, raw.df)
    }
}

impl IwParams {
    pub fn new(scale: CovarianceMatrix, df: f64) -> Result<Self> {
        let p = scale.dim() as f64;
        if !(df > 2.0 * p) || !df.is_finite() {
            return Err(Error::invalid(format!(
                "inverse-Wishart df must exceed 2p = {}, got {df}",
                2.0 * p
            )));
        }
        if !scale.is_positive_definite() {
            return Err(Error::NotPositiveDefinite);
        }
        Ok(Self { scale, df })
    }

    /// The default experiment prior, `IW(I_p, 2p + 3)`.
    pub fn default_prior(p: usize) -> Self {
        Self {
            scale: CovarianceMatrix::identity(p),
            df: 2.0 * p as f64 + 3.0,
        }
    }

    pub fn scale(&self) -> &CovarianceMatrix {
        &self.scale
    }

    pub fn df(&self) -> f64 {
        self.df
    }

    pub fn dim(&self) -> usize {
        self.scale.dim()
    }

    /// Degrees of freedom in the conventional parameterization, `df - p - 1`.
    pub fn standard_df(&self) -> f64 {
        self.df - self.dim() as f64 - 1.0
    }

    /// `scale / (df - 2p - 2)`; undefined unless `df > 2p + 2`.
    pub fn mean(&self) -> Result<CovarianceMatrix> {
        let denom = self.df - 2.0 * self.dim() as f64 - 2.0;
        if denom <= 0.0 {
            return Err(Error::invalid(format!(
                "inverse-Wishart mean needs df > 2p + 2, got df = {}",
                self.df
            )));
        }
        Ok(&self.scale * (1.0 / denom))
    }

    /// Log of the normalizing constant.
    pub fn log_normalizer(&self) -> Result<f64> {
        let p = self.dim();
        let m = self.standard_df();
        let log_det = cholesky_log_det(&self.scale.cholesky()?);
        Ok(0.5 * m * log_det
            - 0.5 * m * p as f64 * std::f64::consts::LN_2
            - log_multivariate_gamma(p, 0.5 * m)?)
    }
}

/// `log Gamma_p(a) = p(p-1)/4 log(pi) + sum_{j=1}^p log Gamma(a + (1-j)/2)`.
pub fn log_multivariate_gamma(p: usize, a: f64) -> Result<f64> {
    if p == 0 {
        return Err(Error::invalid("dimension must be positive"));
    }
    if !(a > 0.5 * (p as f64 - 1.0)) {
        return Err(Error::invalid(format!(
            "log multivariate gamma needs a > (p-1)/2 = {}, got {a}",
            0.5 * (p as f64 - 1.0)
        )));
    }
    let pf = p as f64;
    let head = 0.25 * pf * (pf - 1.0) * std::f64::consts::PI.ln();
    Ok(head + (1..=p).map(|j| ln_gamma(a + 0.5 * (1.0 - j as f64))).sum::<f64>())
}

/// `n` draws from `N_p(0, cov)` computed as `L z` with `L` the lower
/// Cholesky factor.
pub fn sample_mvn(cov: &CovarianceMatrix, n: usize, seed: SeedSpec) -> Result<DataMatrix> {
    if n == 0 {
        return Err(Error::invalid("sample size must be positive"));
    }
    let l = cov.cholesky()?.l();
    let p = cov.dim();
    let mut rng = seed.rng();
    let z = DMatrix::from_row_iterator(n, p, (0..n * p).map(|_| rng.sample::<f64, _>(StandardNormal)));
    DataMatrix::new(z * l.transpose())
}

/// Lower-triangular Bartlett factor: `a_ii^2 ~ chi^2(df - i)` (zero-based `i`)
/// and standard normal entries below the diagonal.
fn bartlett_factor<R: Rng + ?Sized>(p: usize, df: f64, rng: &mut R) -> Result<DMatrix<f64>> {
    let mut a = DMatrix::zeros(p, p);
    for i in 0..p {
        let chi = ChiSquared::new(df - i as f64)
            .map_err(|e| Error::invalid(format!("chi-square parameter: {e}")))?;
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = rng.sample(StandardNormal);
        }
    }
    Ok(a)
}

fn check_wishart_df(p: usize, df: f64) -> Result<()> {
    if !(df > p as f64 - 1.0) || !df.is_finite() {
        return Err(Error::invalid(format!(
            "Wishart df must exceed p - 1 = {}, got {df}",
            p as f64 - 1.0
        )));
    }
    Ok(())
}

/// One Wishart draw in the conventional parameterization, `E[W] = df * scale`.
pub fn sample_wishart(scale: &CovarianceMatrix, df: f64, seed: SeedSpec) -> Result<CovarianceMatrix> {
    let p = scale.dim();
    check_wishart_df(p, df)?;
    let l = scale.cholesky()?.l();
    let mut rng = seed.rng();
    let la = l * bartlett_factor(p, df, &mut rng)?;
    let w = &la * la.transpose();
    Ok(CovarianceMatrix::from_symmetric(crate::linalg::symmetrize(w)))
}

/// Draws from `IW(scale, df)` by inverting Wishart draws with scale
/// `scale^{-1}` and `df - p - 1` conventional degrees of freedom.
///
/// The product `L A` of the Cholesky factor of `scale^{-1}` and the Bartlett
/// factor is itself the Cholesky factor of the Wishart draw, so the inverse
/// only needs a triangular inversion.
#[derive(Clone, Debug)]
pub struct InverseWishartSampler {
    params: IwParams,
    inv_scale_chol: DMatrix<f64>,
}

impl InverseWishartSampler {
    pub fn new(params: IwParams) -> Result<Self> {
        let inv_scale = params.scale().inverse()?;
        let inv_scale_chol = inv_scale.cholesky()?.l();
        Ok(Self {
            params,
            inv_scale_chol,
        })
    }

    pub fn params(&self) -> &IwParams {
        &self.params
    }

    pub fn sample(&self, seed: SeedSpec) -> Result<CovarianceMatrix> {
        let p = self.params.dim();
        let df = self.params.standard_df();
        check_wishart_df(p, df)?;
        let mut rng = seed.rng();
        let la = &self.inv_scale_chol * bartlett_factor(p, df, &mut rng)?;
        let t = la
            .solve_lower_triangular(&DMatrix::identity(p, p))
            .ok_or_else(|| Error::numeric("singular Bartlett factor"))?;
        let sigma = t.tr_mul(&t);
        let sigma = crate::linalg::symmetrize(sigma);
        if sigma.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("non-finite inverse-Wishart draw"));
        }
        Ok(CovarianceMatrix::from_symmetric(sigma))
    }
}

pub fn sample_inverse_wishart(params: &IwParams, seed: SeedSpec) -> Result<CovarianceMatrix> {
    InverseWishartSampler::new(params.clone())?.sample(seed)
}

/// Normalized log density of `IW(params)` at `sigma`.
pub fn iw_log_density(sigma: &CovarianceMatrix, params: &IwParams) -> Result<f64> {
    if sigma.dim() != params.dim() {
        return Err(Error::DimensionMismatch {
            expected: params.dim(),
            found: sigma.dim(),
        });
    }
    let chol = sigma.cholesky()?;
    let log_det = cholesky_log_det(&chol);
    let trace = chol.solve(params.scale().as_matrix()).trace();
    Ok(params.log_normalizer()? - 0.5 * params.df() * log_det - 0.5 * trace)
}
