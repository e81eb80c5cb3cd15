//! Scalar functionals of covariance matrices and interval estimates for them:
//! equal-tailed and HPD credible intervals from posterior draws, and
//! delta-method confidence intervals from the banded Fisher information.

use std::fmt;
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::linalg::{cholesky_log_det, is_banded, BandSpec, CovarianceMatrix};
use crate::posterior::PosteriorSampleSet;

type EvalFn = dyn Fn(&CovarianceMatrix, Option<&DVector<f64>>) -> Result<f64> + Send + Sync;
type GradFn = dyn Fn(&CovarianceMatrix, &BandIndexMap, Option<&DVector<f64>>) -> Result<DVector<f64>> + Send + Sync;

/// A real-valued map of a covariance matrix and an optional conditioning vector.
#[derive(Clone)]
pub struct Functional {
    name: String,
    eval: Arc<EvalFn>,
    gradient: Option<Arc<GradFn>>,
}

impl fmt::Debug for Functional {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Functional")
            .field("name", &self.name)
            .field("analytic_gradient", &self.gradient.is_some())
            .finish()
    }
}

impl Functional {
    pub fn custom<F>(name: impl Into<String>, eval: F) -> Self
    where
        F: Fn(&CovarianceMatrix, Option<&DVector<f64>>) -> Result<f64> + Send + Sync + 'static,
    {
        Self {
            name: name.into(),
            eval: Arc::new(eval),
            gradient: None,
        }
    }

    /// Attaches an analytic gradient with respect to `vecb`.
    pub fn with_gradient<G>(mut self, gradient: G) -> Self
    where
        G: Fn(&CovarianceMatrix, &BandIndexMap, Option<&DVector<f64>>) -> Result<DVector<f64>> + Send + Sync + 'static,
    {
        self.gradient = Some(Arc::new(gradient));
        self
    }

    /// `E(X_p | X_{-p} = x_head)`; needs the conditioning vector.
    pub fn conditional_mean() -> Self {
        Self::custom("conditional_mean", |sigma, x| {
            let x = x.ok_or_else(|| Error::invalid("conditional mean needs a conditioning vector"))?;
            conditional_mean(sigma, x)
        })
    }

    /// The entry `sigma_ij`.
    pub fn entry(i: usize, j: usize) -> Self {
        Self::custom(format!("sigma_{i}_{j}"), move |sigma, _| {
            if i >= sigma.dim() || j >= sigma.dim() {
                return Err(Error::invalid(format!("entry ({i}, {j}) out of range")));
            }
            Ok(sigma.get(i, j))
        })
    }

    /// `log |sigma|`.
    pub fn log_det() -> Self {
        Self::custom("log_det", |sigma, _| Ok(cholesky_log_det(&sigma.cholesky()?)))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn evaluate(&self, sigma: &CovarianceMatrix, x: Option<&DVector<f64>>) -> Result<f64> {
        let v = (self.eval)(sigma, x)?;
        if !v.is_finite() {
            return Err(Error::numeric(format!("functional {} is not finite", self.name)));
        }
        Ok(v)
    }

    /// Evaluates on every draw, in draw order.
    pub fn evaluate_draws(&self, s: &PosteriorSampleSet, x: Option<&DVector<f64>>) -> Result<Vec<f64>> {
        s.draws().par_iter().map(|d| self.evaluate(d, x)).collect()
    }
}

/// `Sigma_{p,-p} Sigma_{-p,-p}^{-1} x_head`.
pub fn conditional_mean(sigma: &CovarianceMatrix, x_head: &DVector<f64>) -> Result<f64> {
    let p = sigma.dim();
    if p < 2 || x_head.len() != p - 1 {
        return Err(Error::DimensionMismatch {
            expected: p.saturating_sub(1),
            found: x_head.len(),
        });
    }
    let m = sigma.as_matrix();
    let lead = m.view((0, 0), (p - 1, p - 1)).into_owned();
    let chol = Cholesky::new(lead).ok_or_else(|| Error::numeric("leading block is not positive definite"))?;
    let w = chol.solve(x_head);
    Ok(m.view((p - 1, 0), (1, p - 1)).transpose().dot(&w))
}

/// Interval method.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntervalMethod {
    Quantile,
    Hpd,
    Delta,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntervalEstimate {
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
    pub method: IntervalMethod,
}

impl IntervalEstimate {
    pub fn length(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }
}

/// The in-band upper-triangle pairs `(i, j)`, `i <= j`, ordered column by column.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BandIndexMap {
    p: usize,
    k: usize,
    pairs: Vec<(usize, usize)>,
}

impl BandIndexMap {
    pub fn new(spec: BandSpec) -> Self {
        let (p, k) = (spec.dim(), spec.bandwidth());
        let pairs = (0..p)
            .flat_map(|j| (j.saturating_sub(k)..=j).map(move |i| (i, j)))
            .collect();
        Self { p, k, pairs }
    }

    pub fn dim(&self) -> usize {
        self.p
    }

    pub fn bandwidth(&self) -> usize {
        self.k
    }

    /// `(k+1) p - k(k+1)/2`.
    pub fn p_star(&self) -> usize {
        self.pairs.len()
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn index_of(&self, i: usize, j: usize) -> Option<usize> {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        if j >= self.p || j - i > self.k {
            return None;
        }
        // columns before j contribute min(c, k) + 1 pairs each
        let before: usize = (0..j).map(|c| c.min(self.k) + 1).sum();
        Some(before + i - j.saturating_sub(self.k))
    }

    pub fn vecb(&self, sigma: &CovarianceMatrix) -> Result<DVector<f64>> {
        if sigma.dim() != self.p {
            return Err(Error::DimensionMismatch {
                expected: self.p,
                found: sigma.dim(),
            });
        }
        Ok(DVector::from_iterator(
            self.pairs.len(),
            self.pairs.iter().map(|&(i, j)| sigma.get(i, j)),
        ))
    }

    /// The banded symmetric matrix with these in-band entries.
    pub fn from_vecb(&self, v: &DVector<f64>) -> Result<CovarianceMatrix> {
        if v.len() != self.pairs.len() {
            return Err(Error::DimensionMismatch {
                expected: self.pairs.len(),
                found: v.len(),
            });
        }
        let mut m = DMatrix::zeros(self.p, self.p);
        for (&(i, j), &x) in self.pairs.iter().zip(v.iter()) {
            m[(i, j)] = x;
            m[(j, i)] = x;
        }
        CovarianceMatrix::new(m)
    }

    /// Positions `(r, c)` in the full matrix holding pair `idx`.
    fn positions(&self, idx: usize) -> impl Iterator<Item = (usize, usize)> {
        let (i, j) = self.pairs[idx];
        std::iter::once((i, j)).chain((i != j).then_some((j, i)))
    }
}

/// The 0/1 matrix `Q` with `vec(Sigma) = Q vecb(Sigma)` for banded `Sigma`;
/// rows follow column-major `vec` order.
pub fn q_matrix(map: &BandIndexMap) -> DMatrix<f64> {
    let p = map.dim();
    let mut q = DMatrix::zeros(p * p, map.p_star());
    for col in 0..map.p_star() {
        for (r, c) in map.positions(col) {
            q[(r + c * p, col)] = 1.0;
        }
    }
    q
}

fn check_level(level: f64) -> Result<()> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid(format!("level must lie in (0, 1), got {level}")));
    }
    Ok(())
}

fn sorted_values(values: &[f64]) -> Result<Vec<f64>> {
    if values.len() < 2 {
        return Err(Error::invalid("need at least two values"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("non-finite value"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(v)
}

/// Linear-interpolation ("type 7") quantile of sorted data.
fn quantile_sorted(v: &[f64], q: f64) -> f64 {
    let h = (v.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

/// Equal-tailed interval between the `alpha/2` and `1 - alpha/2` quantiles.
pub fn quantile_credible_interval(values: &[f64], level: f64) -> Result<IntervalEstimate> {
    check_level(level)?;
    let v = sorted_values(values)?;
    let alpha = 1.0 - level;
    Ok(IntervalEstimate {
        lower: quantile_sorted(&v, alpha / 2.0),
        upper: quantile_sorted(&v, 1.0 - alpha / 2.0),
        level,
        method: IntervalMethod::Quantile,
    })
}

/// Shortest interval spanning `ceil(level * S)` of the sorted values.
pub fn hpd_interval(values: &[f64], level: f64) -> Result<IntervalEstimate> {
    check_level(level)?;
    let v = sorted_values(values)?;
    let s = v.len();
    // the small slack keeps e.g. 0.95 * 100 from rounding up to 96
    let m = ((level * s as f64 - 1e-9).ceil() as usize).clamp(1, s);
    let (start, _) = (0..=s - m)
        .map(|a| (a, v[a + m - 1] - v[a]))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best });
    Ok(IntervalEstimate {
        lower: v[start],
        upper: v[start + m - 1],
        level,
        method: IntervalMethod::Hpd,
    })
}

/// Central finite-difference gradient with respect to `vecb`. Perturbing an
/// off-diagonal coordinate moves both `(i, j)` and `(j, i)`.
pub fn functional_gradient_fd(
    functional: &Functional,
    point: &DVector<f64>,
    map: &BandIndexMap,
    x_head: Option<&DVector<f64>>,
) -> Result<DVector<f64>> {
    let mut grad = DVector::zeros(point.len());
    let mut work = point.clone();
    for c in 0..point.len() {
        let h = (1e-6 * point[c].abs()).max(1e-6);
        work[c] = point[c] + h;
        let up = functional.evaluate(&map.from_vecb(&work)?, x_head)?;
        work[c] = point[c] - h;
        let down = functional.evaluate(&map.from_vecb(&work)?, x_head)?;
        work[c] = point[c];
        grad[c] = (up - down) / (2.0 * h);
        if !grad[c].is_finite() {
            return Err(Error::numeric("non-finite finite-difference gradient"));
        }
    }
    Ok(grad)
}

/// `Q^T (K kron K) Q` with `K = sigma^{-1}`, built entry by entry without
/// forming the Kronecker product.
pub fn banded_fisher_block(sigma: &CovarianceMatrix, map: &BandIndexMap) -> Result<DMatrix<f64>> {
    let k = sigma.inverse()?;
    let km = k.as_matrix();
    let ps = map.p_star();
    let mut f = DMatrix::zeros(ps, ps);
    for u in 0..ps {
        for v in u..ps {
            let mut acc = 0.0;
            for (r1, r2) in map.positions(u) {
                for (c1, c2) in map.positions(v) {
                    acc += km[(r1, c1)] * km[(r2, c2)];
                }
            }
            f[(u, v)] = acc;
            f[(v, u)] = acc;
        }
    }
    Ok(f)
}

/// `phi(sigma_hat) +- z_{alpha/2} sigma_phi / sqrt(n)` with
/// `sigma_phi^2 = 2 grad^T {Q^T (K kron K) Q}^{-1} grad`.
pub fn delta_method_ci(
    sigma_hat: &CovarianceMatrix,
    map: &BandIndexMap,
    n: usize,
    functional: &Functional,
    level: f64,
    x_head: Option<&DVector<f64>>,
) -> Result<IntervalEstimate> {
    check_level(level)?;
    if n == 0 {
        return Err(Error::invalid("sample size must be positive"));
    }
    let spec = BandSpec::new(map.bandwidth(), map.dim())?;
    if sigma_hat.dim() != map.dim() {
        return Err(Error::DimensionMismatch {
            expected: map.dim(),
            found: sigma_hat.dim(),
        });
    }
    if !is_banded(sigma_hat, spec) {
        return Err(Error::invalid("delta-method estimate must be banded"));
    }
    let center = functional.evaluate(sigma_hat, x_head)?;
    let grad = match &functional.gradient {
        Some(g) => g(sigma_hat, map, x_head)?,
        None => functional_gradient_fd(functional, &map.vecb(sigma_hat)?, map, x_head)?,
    };
    let fisher = banded_fisher_block(sigma_hat, map)?;
    let solved = Cholesky::new(fisher)
        .ok_or_else(|| Error::numeric("singular Fisher information block"))?
        .solve(&grad);
    let variance = 2.0 * grad.dot(&solved);
    let z = standard_normal_quantile(1.0 - (1.0 - level) / 2.0);
    let half = z * (variance / n as f64).sqrt();
    Ok(IntervalEstimate {
        lower: center - half,
        upper: center + half,
        level,
        method: IntervalMethod::Delta,
    })
}

pub fn standard_normal_quantile(q: f64) -> f64 {
    Normal::standard().inverse_cdf(q)
}
