//! Frequentist baselines: sample covariance and its banded and ridge variants,
//! the dual maximum likelihood estimator, and the banded Gaussian MLE by
//! iterative conditional fitting.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{band, cholesky_log_det, eigenvalues, is_banded, symmetrize, BandSpec, CovarianceMatrix};
use crate::sampling::DataMatrix;

pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 500;

/// Inputs with `lambda_min < NEAR_SINGULAR * lambda_max` are rejected.
const NEAR_SINGULAR: f64 = 1e-10;

/// `n^{-1} sum_i x_i x_i^T`, without centering.
pub fn sample_cov(data: &DataMatrix) -> CovarianceMatrix {
    let s = data.scatter() / data.n() as f64;
    CovarianceMatrix::from_symmetric(symmetrize(s))
}

/// Banded sample covariance. Not necessarily positive definite.
pub fn banded_sample_cov(data: &DataMatrix, spec: BandSpec) -> Result<CovarianceMatrix> {
    band(&sample_cov(data), spec)
}

/// `S_n + eps I`.
pub fn ridge_adjusted_cov(data: &DataMatrix, eps: f64) -> Result<CovarianceMatrix> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::invalid(format!("ridge eps must be positive, got {eps}")));
    }
    let mut s = sample_cov(data).into_matrix();
    for i in 0..s.nrows() {
        s[(i, i)] += eps;
    }
    Ok(CovarianceMatrix::from_symmetric(s))
}

/// Gaussian negative log-likelihood kernel `tr(sigma^{-1} s) + log|sigma|`.
pub fn gaussian_objective(sigma: &CovarianceMatrix, s: &CovarianceMatrix) -> Result<f64> {
    let chol = sigma.cholesky()?;
    Ok(chol.solve(s.as_matrix()).trace() + cholesky_log_det(&chol))
}

fn check_well_conditioned(m: &CovarianceMatrix) -> Result<()> {
    let ev = eigenvalues(m)?;
    let (lo, hi) = (ev[0], ev[ev.len() - 1]);
    if lo <= 0.0 {
        return Err(Error::NotPositiveDefinite);
    }
    if lo < NEAR_SINGULAR * hi {
        return Err(Error::numeric(format!(
            "input is near-singular (lambda_min {lo:e}, lambda_max {hi:e}); apply a ridge adjustment first"
        )));
    }
    Ok(())
}

fn check_dim(m: &CovarianceMatrix, spec: BandSpec) -> Result<()> {
    if m.dim() != spec.dim() {
        return Err(Error::DimensionMismatch {
            expected: spec.dim(),
            found: m.dim(),
        });
    }
    Ok(())
}

/// Output of [`dual_mle_fit`].
#[derive(Clone, Debug)]
pub struct DualFit {
    pub estimate: CovarianceMatrix,
    /// Full clique sweeps performed; zero when the target was already banded.
    pub sweeps: usize,
    /// Max absolute on-band difference between `estimate^{-1}` and `target^{-1}`.
    pub residual: f64,
}

/// Banded `A` with `(A^{-1})_{ij} = (target^{-1})_{ij}` on the band.
pub fn dual_mle(target: &CovarianceMatrix, spec: BandSpec, tol: f64, max_iter: usize) -> Result<CovarianceMatrix> {
    dual_mle_fit(target, spec, tol, max_iter).map(|f| f.estimate)
}

/// Solves the dual problem as a concentration-graph MLE with the roles of
/// covariance and precision swapped: iterative proportional fitting over the
/// band cliques `{t, ..., t+k}` with `target^{-1}` as the second-moment
/// matrix. The fitted concentration matrix is the answer.
pub fn dual_mle_fit(target: &CovarianceMatrix, spec: BandSpec, tol: f64, max_iter: usize) -> Result<DualFit> {
    check_dim(target, spec)?;
    if is_banded(target, spec) && target.is_positive_definite() {
        return Ok(DualFit {
            estimate: target.clone(),
            sweeps: 0,
            residual: 0.0,
        });
    }
    check_well_conditioned(target)?;
    let p = spec.dim();
    let k = spec.bandwidth();
    let moment = target.inverse()?.into_matrix();

    // Concentration matrix being fitted and its running inverse.
    let mut conc = DMatrix::<f64>::identity(p, p);
    let mut cov = DMatrix::<f64>::identity(p, p);
    let width = k + 1;
    let mut residual = f64::INFINITY;

    for sweep in 1..=max_iter {
        for start in 0..=(p - width) {
            let m_cc = moment.view((start, start), (width, width)).into_owned();
            let s_cc = cov.view((start, start), (width, width)).into_owned();
            let m_inv = Cholesky::new(m_cc.clone())
                .ok_or_else(|| Error::numeric("clique block of target inverse is not positive definite"))?
                .inverse();
            let s_chol = Cholesky::new(s_cc.clone())
                .ok_or_else(|| Error::numeric("intermediate covariance lost positive definiteness"))?;
            let s_inv = s_chol.inverse();

            let mut block = conc.view_mut((start, start), (width, width));
            block += &m_inv - &s_inv;

            // cov += B^T (M_cc - S_cc) B with B = S_cc^{-1} cov[C, :]
            let rows = cov.rows(start, width).into_owned();
            let b = s_chol.solve(&rows);
            let delta = &m_cc - &s_cc;
            cov += b.transpose() * (delta * &b);
        }
        conc = symmetrize(conc);
        let fresh = Cholesky::new(conc.clone())
            .ok_or_else(|| Error::numeric("fitted matrix is not positive definite"))?
            .inverse();
        residual = band_residual(&fresh, &moment, k);
        cov = symmetrize(fresh);
        if residual <= tol {
            return Ok(DualFit {
                estimate: CovarianceMatrix::from_symmetric(conc),
                sweeps: sweep,
                residual,
            });
        }
    }
    Err(Error::Convergence {
        iterations: max_iter,
        residual,
    })
}

fn band_residual(a: &DMatrix<f64>, b: &DMatrix<f64>, k: usize) -> f64 {
    let p = a.nrows();
    let mut r: f64 = 0.0;
    for j in 0..p {
        let lo = j.saturating_sub(k);
        let hi = (j + k).min(p - 1);
        for i in lo..=hi {
            r = r.max((a[(i, j)] - b[(i, j)]).abs());
        }
    }
    r
}

/// Output of [`mle_icf_fit`].
#[derive(Clone, Debug)]
pub struct IcfFit {
    pub estimate: CovarianceMatrix,
    /// Objective `tr(sigma^{-1} s) + log|sigma|` at the start and after every sweep.
    pub objectives: Vec<f64>,
    pub sweeps: usize,
    /// Max absolute on-band entry of `K s K - K`, `K = estimate^{-1}`.
    pub kkt_residual: f64,
}

/// Banded Gaussian MLE for second-moment matrix `s`.
pub fn mle_icf(s: &CovarianceMatrix, spec: BandSpec, tol: f64, max_iter: usize) -> Result<CovarianceMatrix> {
    mle_icf_fit(s, spec, tol, max_iter).map(|f| f.estimate)
}

/// Iterative conditional fitting: each step regresses variable `i` on the
/// pseudo-variables `Sigma_{-i,-i}^{-1} X_{-i}` restricted to its band
/// neighbours, which updates row and column `i` of `Sigma` while holding the
/// rest fixed. Sweeps repeat until the on-band KKT residual is below `tol`.
pub fn mle_icf_fit(s: &CovarianceMatrix, spec: BandSpec, tol: f64, max_iter: usize) -> Result<IcfFit> {
    check_dim(s, spec)?;
    check_well_conditioned(s)?;
    let p = spec.dim();
    let k = spec.bandwidth();
    let s_mat = s.as_matrix();

    if k + 1 == p {
        return Ok(IcfFit {
            estimate: s.clone(),
            objectives: vec![p as f64 + cholesky_log_det(&s.cholesky()?)],
            sweeps: 0,
            kkt_residual: 0.0,
        });
    }

    let mut sigma = DMatrix::from_diagonal(&s_mat.diagonal());
    let (mut objective, mut residual) = objective_and_kkt(&sigma, s_mat, k)?;
    let mut objectives = vec![objective];
    if residual <= tol {
        return Ok(IcfFit {
            estimate: CovarianceMatrix::from_symmetric(sigma),
            objectives,
            sweeps: 0,
            kkt_residual: residual,
        });
    }

    for sweep in 1..=max_iter {
        let mut conc = Cholesky::new(sigma.clone())
            .ok_or_else(|| Error::numeric("ICF iterate lost positive definiteness"))?
            .inverse();
        for i in 0..p {
            icf_step(&mut sigma, &mut conc, s_mat, i, k)?;
        }
        sigma = symmetrize(sigma);
        let (next, r) = objective_and_kkt(&sigma, s_mat, k)?;
        if next > objective + 1e-10 * objective.abs().max(1.0) {
            return Err(Error::Internal(format!(
                "likelihood decreased during sweep {sweep}: objective {objective} -> {next}"
            )));
        }
        objective = next;
        residual = r;
        objectives.push(objective);
        if residual <= tol {
            return Ok(IcfFit {
                estimate: CovarianceMatrix::from_symmetric(sigma),
                objectives,
                sweeps: sweep,
                kkt_residual: residual,
            });
        }
    }
    Err(Error::Convergence {
        iterations: max_iter,
        residual,
    })
}

fn objective_and_kkt(sigma: &DMatrix<f64>, s: &DMatrix<f64>, k: usize) -> Result<(f64, f64)> {
    let chol = Cholesky::new(sigma.clone()).ok_or_else(|| Error::numeric("ICF iterate is not positive definite"))?;
    let conc = chol.inverse();
    let ks = &conc * s;
    let objective = ks.trace() + cholesky_log_det(&chol);
    let kskk = &ks * &conc - &conc;
    let zero = DMatrix::zeros(sigma.nrows(), sigma.ncols());
    Ok((objective, band_residual(&kskk, &zero, k)))
}

/// One conditional update of row/column `i`. `conc` holds `sigma^{-1}` on
/// entry and is kept in sync on exit.
fn icf_step(sigma: &mut DMatrix<f64>, conc: &mut DMatrix<f64>, s: &DMatrix<f64>, i: usize, k: usize) -> Result<()> {
    let p = sigma.nrows();
    let nb: Vec<usize> = (i.saturating_sub(k)..=(i + k).min(p - 1)).filter(|&j| j != i).collect();
    let kii = conc[(i, i)];

    if nb.is_empty() {
        let lambda = s[(i, i)];
        let old_col = conc.column(i).into_owned();
        for l in 0..p {
            for j in 0..p {
                if j != i && l != i {
                    conc[(j, l)] -= old_col[j] * old_col[l] / kii;
                }
            }
        }
        for j in 0..p {
            conc[(i, j)] = 0.0;
            conc[(j, i)] = 0.0;
        }
        conc[(i, i)] = 1.0 / lambda;
        sigma[(i, i)] = lambda;
        return Ok(());
    }

    // Rows of Omega = (Sigma_{-i,-i})^{-1} for the neighbours, column i zeroed.
    let m = nb.len();
    let mut omega_nb = DMatrix::<f64>::zeros(m, p);
    for (a, &na) in nb.iter().enumerate() {
        let scale = conc[(na, i)] / kii;
        for j in 0..p {
            if j != i {
                omega_nb[(a, j)] = conc[(na, j)] - scale * conc[(i, j)];
            }
        }
    }
    let r = &omega_nb * s;
    let mut gram = DMatrix::<f64>::zeros(m, m);
    let mut cross = DVector::<f64>::zeros(m);
    for a in 0..m {
        cross[a] = r[(a, i)];
        for b in 0..m {
            gram[(a, b)] = (0..p).filter(|&j| j != i).map(|j| r[(a, j)] * omega_nb[(b, j)]).sum();
        }
    }
    let gram = symmetrize(gram);
    let beta = Cholesky::new(gram)
        .ok_or_else(|| Error::numeric("singular pseudo-variable Gram matrix"))?
        .solve(&cross);
    let lambda = s[(i, i)] - cross.dot(&beta);
    if !(lambda > 0.0) {
        return Err(Error::numeric("non-positive conditional variance"));
    }
    let u: DVector<f64> = omega_nb.tr_mul(&beta);

    for (a, &na) in nb.iter().enumerate() {
        sigma[(i, na)] = beta[a];
        sigma[(na, i)] = beta[a];
    }
    sigma[(i, i)] = lambda + nb.iter().enumerate().map(|(a, &na)| beta[a] * u[na]).sum::<f64>();

    let old_col = conc.column(i).into_owned();
    for l in 0..p {
        if l == i {
            continue;
        }
        for j in 0..p {
            if j != i {
                conc[(j, l)] += u[j] * u[l] / lambda - old_col[j] * old_col[l] / kii;
            }
        }
    }
    for j in 0..p {
        if j != i {
            conc[(i, j)] = -u[j] / lambda;
            conc[(j, i)] = -u[j] / lambda;
        }
    }
    conc[(i, i)] = 1.0 / lambda;
    Ok(())
}
