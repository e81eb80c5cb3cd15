//! Tuning-parameter selection by leave-one-out cross-validation.
//!
//! The Bayesian scores reuse a single set of draws from the full-data initial
//! posterior and reweight them by the closed-form ratio between the
//! leave-one-out posterior and the full posterior, both inverse-Wishart. The
//! score is a log predictive density, so the selected value maximizes it.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{band_matrix, cholesky_log_det, eigen_decomposition, gaussian_log_density, BandSpec, CovarianceMatrix};
use crate::posterior::{conjugate_update, default_epsilon, PostProcessing, PosteriorSampleSet};
use crate::sampling::{iw_log_density, DataMatrix, IwParams};

pub const SELECTION_POLICY: &str = "maximize-log-predictive";

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Candidate values for the eigenvalue floor and the bandwidth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvGrid {
    pub epsilon_values: Vec<f64>,
    pub bandwidth_values: Vec<usize>,
}

impl CvGrid {
    pub fn new(epsilon_values: Vec<f64>, bandwidth_values: Vec<usize>) -> Result<Self> {
        if epsilon_values.is_empty() || bandwidth_values.is_empty() {
            return Err(Error::invalid("cross-validation grids must be nonempty"));
        }
        if epsilon_values.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
            return Err(Error::invalid("epsilon candidates must be positive and finite"));
        }
        if epsilon_values.windows(2).any(|w| w[0] >= w[1]) || bandwidth_values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("grid values must be strictly increasing"));
        }
        Ok(Self {
            epsilon_values,
            bandwidth_values,
        })
    }

    /// Ten log-spaced floors in `[1e-3, 1]` and bandwidths `0..=min(20, p-1)`.
    pub fn default_for(p: usize) -> Self {
        Self {
            epsilon_values: default_epsilon_grid(),
            bandwidth_values: (0..=20.min(p.saturating_sub(1))).collect(),
        }
    }
}

pub fn default_epsilon_grid() -> Vec<f64> {
    (0..10).map(|i| 10f64.powf(-3.0 + 3.0 * i as f64 / 9.0)).collect()
}

/// Scores for every candidate and the winner.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvReport<T> {
    pub candidates: Vec<T>,
    pub scores: Vec<f64>,
    pub selected: T,
    pub policy: String,
    /// Per-observation log terms of the selected candidate.
    pub per_observation_terms: Vec<f64>,
    /// Floor used with the selected bandwidth, for bandwidth reports.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected_eps: Option<f64>,
}

impl<T: Copy> CvReport<T> {
    /// Picks the maximizer; ties go to the earliest candidate.
    fn from_scored(scored: Vec<(T, f64, Vec<f64>, Option<f64>)>) -> Result<Self> {
        let mut best: Option<usize> = None;
        for (idx, (_, score, _, _)) in scored.iter().enumerate() {
            if !score.is_finite() {
                return Err(Error::numeric("non-finite cross-validation score"));
            }
            if best.is_none_or(|b| *score > scored[b].1) {
                best = Some(idx);
            }
        }
        let best = best.ok_or_else(|| Error::invalid("no candidates were scored"))?;
        let selected = scored[best].0;
        let selected_eps = scored[best].3;
        let per_observation_terms = scored[best].2.clone();
        Ok(Self {
            candidates: scored.iter().map(|s| s.0).collect(),
            scores: scored.iter().map(|s| s.1).collect(),
            selected,
            policy: SELECTION_POLICY.to_string(),
            per_observation_terms,
            selected_eps,
        })
    }
}

/// `log pi(sigma | X_{-i}) - log pi(sigma | X)` under the conjugate posterior.
/// With a single observation the leave-one-out posterior is the prior.
pub fn loo_log_weight(sigma: &CovarianceMatrix, data: &DataMatrix, i: usize, prior: &IwParams) -> Result<f64> {
    if i >= data.n() {
        return Err(Error::invalid(format!("observation index {i} out of range for n = {}", data.n())));
    }
    let full = conjugate_update(prior, data)?;
    let loo = match data.without_row(i) {
        Some(rest) => conjugate_update(prior, &rest)?,
        None => prior.clone(),
    };
    Ok(iw_log_density(sigma, &loo)? - iw_log_density(sigma, &full)?)
}

/// How the floor is chosen for each bandwidth during bandwidth selection.
#[derive(Clone, Debug, PartialEq)]
pub enum EpsPolicy {
    /// Select by cross-validation over these candidates for every bandwidth.
    Nested(Vec<f64>),
    /// Use [`default_epsilon`] for each bandwidth.
    Theoretical,
    Fixed(f64),
}

/// Precomputed leave-one-out importance weights for one set of initial
/// posterior draws.
pub struct LooEngine<'a> {
    draws: &'a [CovarianceMatrix],
    data: &'a DataMatrix,
    /// `log_weights[(s, i)]`.
    log_weights: DMatrix<f64>,
}

impl<'a> LooEngine<'a> {
    pub fn new(s: &'a PosteriorSampleSet, data: &'a DataMatrix, prior: &IwParams) -> Result<Self> {
        if s.processing() != PostProcessing::None {
            return Err(Error::InvalidState(
                "cross-validation needs unprocessed initial-posterior draws".into(),
            ));
        }
        if data.p() != s.dim() {
            return Err(Error::DimensionMismatch {
                expected: s.dim(),
                found: data.p(),
            });
        }
        let n = data.n();
        let full = conjugate_update(prior, data)?;
        let full_norm = full.log_normalizer()?;
        // Normalizer ratio for each left-out observation.
        let offsets = (0..n)
            .map(|i| {
                let loo = match data.without_row(i) {
                    Some(rest) => conjugate_update(prior, &rest)?,
                    None => prior.clone(),
                };
                Ok(loo.log_normalizer()? - full_norm)
            })
            .collect::<Result<Vec<f64>>>()?;

        let rows = s
            .draws()
            .par_iter()
            .map(|sigma| {
                let chol = sigma.cholesky()?;
                let half_log_det = 0.5 * cholesky_log_det(&chol);
                let z = chol
                    .l_dirty()
                    .solve_lower_triangular(&data.as_matrix().transpose())
                    .ok_or_else(|| Error::numeric("singular posterior draw"))?;
                Ok((0..n)
                    .map(|i| offsets[i] + half_log_det + 0.5 * z.column(i).norm_squared())
                    .collect::<Vec<f64>>())
            })
            .collect::<Result<Vec<_>>>()?;
        let log_weights = DMatrix::from_fn(rows.len(), n, |s, i| rows[s][i]);
        Ok(Self {
            draws: s.draws(),
            data,
            log_weights,
        })
    }

    pub fn log_weights(&self) -> &DMatrix<f64> {
        &self.log_weights
    }

    /// Estimated log predictive density and its per-observation terms for
    /// each floor in `eps_values`, at bandwidth `spec`.
    pub fn score(&self, spec: BandSpec, eps_values: &[f64]) -> Result<Vec<(f64, Vec<f64>)>> {
        if spec.dim() != self.data.p() {
            return Err(Error::DimensionMismatch {
                expected: self.data.p(),
                found: spec.dim(),
            });
        }
        if eps_values.iter().any(|e| !(*e > 0.0)) {
            return Err(Error::invalid("floors must be positive"));
        }
        let n = self.data.n();
        let p = self.data.p();
        let g = eps_values.len();
        let x = self.data.as_matrix();

        // terms[s][(gi, i)] = log p(x_i | B_k^eps(Sigma_s)) + log weight
        let terms = self
            .draws
            .par_iter()
            .enumerate()
            .map(|(s, sigma)| {
                let banded = band_matrix(sigma.as_matrix(), spec.bandwidth());
                let eig = eigen_decomposition(&banded)?;
                let lambda_min = eig.eigenvalues.min();
                let proj = x * &eig.eigenvectors;
                let proj_sq = proj.map(|v| v * v);
                let mut out = DMatrix::<f64>::zeros(g, n);
                for (gi, &eps) in eps_values.iter().enumerate() {
                    let shift = if lambda_min < eps { eps - lambda_min } else { 0.0 };
                    let shifted: DVector<f64> = eig.eigenvalues.map(|l| l + shift);
                    let log_det: f64 = shifted.iter().map(|l| l.ln()).sum();
                    let inv: DVector<f64> = shifted.map(|l| 1.0 / l);
                    let quad = &proj_sq * &inv;
                    for i in 0..n {
                        let lp = -0.5 * (p as f64 * LN_2PI + log_det + quad[i]);
                        out[(gi, i)] = lp + self.log_weights[(s, i)];
                    }
                }
                Ok(out)
            })
            .collect::<Result<Vec<_>>>()?;

        let log_s = (self.draws.len() as f64).ln();
        let mut results = Vec::with_capacity(g);
        for gi in 0..g {
            let mut per_obs = Vec::with_capacity(n);
            for i in 0..n {
                let lse = log_sum_exp(terms.iter().map(|t| t[(gi, i)]));
                if !lse.is_finite() {
                    return Err(Error::DegenerateWeights { observation: i });
                }
                per_obs.push(lse - log_s);
            }
            results.push((per_obs.iter().sum(), per_obs));
        }
        Ok(results)
    }
}

pub(crate) fn log_sum_exp<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let v: Vec<f64> = values.into_iter().collect();
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Importance-weighted leave-one-out log predictive density at a single floor.
pub fn estimated_log_predictive_eps(
    s: &PosteriorSampleSet,
    data: &DataMatrix,
    spec: BandSpec,
    eps: f64,
    prior: &IwParams,
) -> Result<f64> {
    let engine = LooEngine::new(s, data, prior)?;
    Ok(engine.score(spec, &[eps])?[0].0)
}

pub fn select_epsilon(
    s: &PosteriorSampleSet,
    data: &DataMatrix,
    spec: BandSpec,
    grid: &CvGrid,
    prior: &IwParams,
) -> Result<CvReport<f64>> {
    let engine = LooEngine::new(s, data, prior)?;
    select_epsilon_with(&engine, spec, &grid.epsilon_values)
}

pub fn select_epsilon_with(engine: &LooEngine<'_>, spec: BandSpec, eps_values: &[f64]) -> Result<CvReport<f64>> {
    if eps_values.is_empty() {
        return Err(Error::invalid("epsilon grid is empty"));
    }
    let scored = engine
        .score(spec, eps_values)?
        .into_iter()
        .zip(eps_values)
        .map(|((score, terms), &eps)| (eps, score, terms, Some(eps)))
        .collect();
    CvReport::from_scored(scored)
}

pub fn select_bandwidth(
    s: &PosteriorSampleSet,
    data: &DataMatrix,
    grid: &CvGrid,
    prior: &IwParams,
    eps_policy: &EpsPolicy,
) -> Result<CvReport<usize>> {
    let p = data.p();
    if let Some(&bad) = grid.bandwidth_values.iter().find(|&&k| k >= p) {
        return Err(Error::invalid(format!("bandwidth candidate {bad} exceeds p - 1 = {}", p - 1)));
    }
    if grid.bandwidth_values.is_empty() {
        return Err(Error::invalid("bandwidth grid is empty"));
    }
    let engine = LooEngine::new(s, data, prior)?;
    let mut scored = Vec::with_capacity(grid.bandwidth_values.len());
    for &k in &grid.bandwidth_values {
        let spec = BandSpec::new(k, p)?;
        let (eps, score, terms) = match eps_policy {
            EpsPolicy::Nested(values) => {
                let r = select_epsilon_with(&engine, spec, values)?;
                let best = r.candidates.iter().position(|&e| e == r.selected).unwrap_or(0);
                (r.selected, r.scores[best], r.per_observation_terms)
            }
            EpsPolicy::Theoretical => {
                let eps = default_epsilon(k, p, data.n());
                let (score, terms) = engine.score(spec, &[eps])?.remove(0);
                (eps, score, terms)
            }
            EpsPolicy::Fixed(eps) => {
                let (score, terms) = engine.score(spec, &[*eps])?.remove(0);
                (*eps, score, terms)
            }
        };
        scored.push((k, score, terms, Some(eps)));
    }
    CvReport::from_scored(scored)
}

/// Per-fold terms `log p{x_i | h(X_{-i})}` for a frequentist estimator `h`.
pub fn frequentist_loo_terms<F>(estimator: F, data: &DataMatrix) -> Result<Vec<f64>>
where
    F: Fn(&DataMatrix) -> Result<CovarianceMatrix> + Sync,
{
    if data.n() < 2 {
        return Err(Error::invalid("leave-one-out needs at least two observations"));
    }
    (0..data.n())
        .into_par_iter()
        .map(|i| {
            let fold = |i: usize| -> Result<f64> {
                let rest = data.without_row(i).expect("n >= 2");
                let est = estimator(&rest)?;
                let chol = est.cholesky()?;
                Ok(gaussian_log_density(&chol, cholesky_log_det(&chol), &data.row(i)))
            };
            fold(i).map_err(|e| Error::FoldFailure {
                fold: i,
                source: Box::new(e),
            })
        })
        .collect()
}

/// `sum_i log p{x_i | h(X_{-i})}`.
pub fn frequentist_loo_score<F>(estimator: F, data: &DataMatrix) -> Result<f64>
where
    F: Fn(&DataMatrix) -> Result<CovarianceMatrix> + Sync,
{
    Ok(frequentist_loo_terms(estimator, data)?.iter().sum())
}

/// Maximizes the frequentist score over `candidates`. Candidates whose
/// estimator fails on some fold are left out of the report; if every
/// candidate fails, the first failure is returned.
pub fn select_frequentist<T, M, F>(candidates: &[T], data: &DataMatrix, make: M) -> Result<CvReport<T>>
where
    T: Copy + Send + Sync,
    M: Fn(T) -> F,
    F: Fn(&DataMatrix) -> Result<CovarianceMatrix> + Sync,
{
    let mut scored = Vec::new();
    let mut first_err = None;
    for &c in candidates {
        match frequentist_loo_terms(make(c), data) {
            Ok(terms) => scored.push((c, terms.iter().sum(), terms, None)),
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    if scored.is_empty() {
        return Err(first_err.unwrap_or_else(|| Error::invalid("no candidates")));
    }
    CvReport::from_scored(scored)
}
