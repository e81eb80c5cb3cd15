//! Independent reference implementations used by the integration tests.
//!
//! Nothing here calls into the library's numerical routines except to build
//! inputs; every oracle is a separate, deliberately naive computation.
#![allow(dead_code)]

use bandpost::posterior::{conjugate_update, draw_initial_samples};
use bandpost::sampling::{DataMatrix, IwParams, SeedSpec};
use bandpost::CovarianceMatrix;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

/// Random symmetric positive definite matrix `G G^T / p + floor I`.
pub fn random_pd(p: usize, floor: f64, seed: u64) -> CovarianceMatrix {
    let mut rng = SeedSpec::new(seed).rng();
    let g = DMatrix::from_fn(p, p, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut m = &g * g.transpose() / p as f64;
    for i in 0..p {
        m[(i, i)] += floor;
    }
    CovarianceMatrix::new(m).unwrap()
}

pub fn random_symmetric(p: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = SeedSpec::new(seed).rng();
    let g = DMatrix::from_fn(p, p, |_, _| rng.sample::<f64, _>(StandardNormal));
    (&g + g.transpose()) * 0.5
}

pub fn random_vector(p: usize, seed: u64) -> DVector<f64> {
    let mut rng = SeedSpec::new(seed).rng();
    DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Cyclic Jacobi rotations; returns the sorted eigenvalues.
pub fn jacobi_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let n = m.nrows();
    let mut a = m.clone();
    for _ in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    off += a[(i, j)] * a[(i, j)];
                }
            }
        }
        if off < 1e-26 * (1.0 + a.norm_squared()) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[(p, q)].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * a[(p, q)]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
    ev.sort_by(f64::total_cmp);
    ev
}

/// Largest singular value via power iteration on `m^2`, finished with a
/// Rayleigh quotient.
pub fn power_iteration_norm(m: &DMatrix<f64>) -> f64 {
    let sq = m * m;
    let n = m.nrows();
    let mut v = DVector::from_fn(n, |i, _| 1.0 + 0.01 * i as f64);
    v /= v.norm();
    let mut last = 0.0;
    for it in 0..200_000 {
        let w = &sq * &v;
        let lambda = v.dot(&w);
        v = &w / w.norm();
        if it > 50 && (lambda - last).abs() <= 1e-15 * lambda.abs() {
            break;
        }
        last = lambda;
    }
    v.dot(&(&sq * &v)).sqrt()
}

/// Zero-mean Gaussian log density computed through a plain LU inverse.
pub fn gaussian_logpdf(sigma: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    let p = x.len() as f64;
    let inv = sigma.clone().try_inverse().unwrap();
    let det = sigma.determinant();
    -0.5 * (p * (2.0 * std::f64::consts::PI).ln() + det.ln() + x.dot(&(&inv * x)))
}

pub fn band_naive(m: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| if i.abs_diff(j) <= k { m[(i, j)] } else { 0.0 })
}

/// Band then lift the smallest eigenvalue to `eps` when it falls short.
pub fn pd_adjust_naive(m: &DMatrix<f64>, k: usize, eps: f64) -> DMatrix<f64> {
    let mut b = band_naive(m, k);
    let lo = jacobi_eigenvalues(&b)[0];
    if lo < eps {
        for i in 0..b.nrows() {
            b[(i, i)] += eps - lo;
        }
    }
    b
}

/// Bisection for a sign change of `f` on `[lo, hi]`.
pub fn bisect<F: Fn(f64) -> f64>(f: F, mut lo: f64, mut hi: f64) -> f64 {
    let mut flo = f(lo);
    assert!(flo * f(hi) <= 0.0, "bisection interval does not bracket a root");
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let fm = f(mid);
        if fm == 0.0 {
            return mid;
        }
        if (fm < 0.0) == (flo < 0.0) {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// `tr(sigma^{-1} s) + log|sigma|` through an LU inverse; `+inf` if not PD.
pub fn objective_naive(sigma: &DMatrix<f64>, s: &DMatrix<f64>) -> f64 {
    if sigma.clone().cholesky().is_none() {
        return f64::INFINITY;
    }
    let inv = sigma.clone().try_inverse().unwrap();
    (inv * s).trace() + sigma.determinant().ln()
}

/// Minimizes the Gaussian objective over `k`-banded symmetric matrices by
/// gradient descent with Armijo backtracking on the band coordinates.
pub fn projected_gradient_mle(s: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let mut sigma = DMatrix::from_diagonal(&s.diagonal());
    let mut f = objective_naive(&sigma, s);
    for _ in 0..200_000 {
        let inv = sigma.clone().try_inverse().unwrap();
        // d/dSigma of the objective, restricted to the band
        let g = band_naive(&(&inv - &inv * s * &inv), k);
        let gnorm = g.norm();
        if gnorm < 1e-13 {
            break;
        }
        let mut step = 1.0;
        loop {
            let trial = &sigma - &g * step;
            let ft = objective_naive(&trial, s);
            if ft <= f - 1e-4 * step * gnorm * gnorm {
                sigma = trial;
                f = ft;
                break;
            }
            step *= 0.5;
            if step < 1e-20 {
                return sigma;
            }
        }
    }
    sigma
}

/// Brute-force leave-one-out log predictive density: for every observation,
/// draw directly from the posterior without it and average the predictive
/// density of the held-out row under the processed draws. Returns the total
/// and its Monte Carlo standard error.
pub fn refit_loo<F>(data: &DataMatrix, prior: &IwParams, draws: usize, seed: SeedSpec, process: F) -> (f64, f64)
where
    F: Fn(&CovarianceMatrix) -> DMatrix<f64>,
{
    let mut total = 0.0;
    let mut var = 0.0;
    for i in 0..data.n() {
        let rest = data.without_row(i).unwrap();
        let post = conjugate_update(prior, &rest).unwrap();
        let s = draw_initial_samples(&post, draws, seed.child(i as u64)).unwrap();
        let x = data.row(i);
        let dens: Vec<f64> = s.draws().iter().map(|d| gaussian_logpdf(&process(d), &x).exp()).collect();
        let (mean, se) = mean_and_se(&dens);
        total += mean.ln();
        var += (se / mean).powi(2);
    }
    (total, var.sqrt())
}

pub fn mean_and_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Analytic gradient of `Sigma_{p,h} Sigma_{hh}^{-1} x` with respect to the
/// band coordinates listed in `pairs`.
pub fn conditional_mean_gradient(sigma: &DMatrix<f64>, x: &DVector<f64>, pairs: &[(usize, usize)]) -> DVector<f64> {
    let p = sigma.nrows();
    let h = p - 1;
    let hh = sigma.view((0, 0), (h, h)).into_owned();
    let hh_inv = hh.try_inverse().unwrap();
    let w = &hh_inv * x;
    let c = &hh_inv * sigma.view((0, h), (h, 1));
    let mut u = DVector::zeros(p);
    let mut v = DVector::zeros(p);
    for r in 0..h {
        u[r] = -c[r];
        v[r] = w[r];
    }
    u[h] = 1.0;
    DVector::from_iterator(
        pairs.len(),
        pairs.iter().map(|&(a, b)| if a == b { u[a] * v[a] } else { u[a] * v[b] + u[b] * v[a] }),
    )
}

/// Two-sided Kolmogorov-Smirnov statistic of `sample` against `cdf`.
pub fn ks_statistic<F: Fn(f64) -> f64>(sample: &[f64], cdf: F) -> f64 {
    let mut v = sample.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Type-7 quantile by direct interpolation on sorted data.
pub fn type7(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Importance-sampling LOO total recomputed from the engine's log weights,
/// with its Monte Carlo standard error.
pub fn importance_loo<F>(log_weights: &DMatrix<f64>, draws: &[CovarianceMatrix], data: &DataMatrix, process: F) -> (f64, f64)
where
    F: Fn(&CovarianceMatrix) -> DMatrix<f64>,
{
    let processed: Vec<DMatrix<f64>> = draws.iter().map(&process).collect();
    let mut total = 0.0;
    let mut var = 0.0;
    for i in 0..data.n() {
        let x = data.row(i);
        let terms: Vec<f64> = processed
            .iter()
            .enumerate()
            .map(|(s, d)| (log_weights[(s, i)] + gaussian_logpdf(d, &x)).exp())
            .collect();
        let (mean, se) = mean_and_se(&terms);
        total += mean.ln();
        var += (se / mean).powi(2);
    }
    (total, var.sqrt())
}
