//! The estimator registry used by the experiments and the CLI.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frequentist::{
    banded_sample_cov, dual_mle, mle_icf, ridge_adjusted_cov, sample_cov, DEFAULT_MAX_ITER, DEFAULT_TOL,
};
use crate::linalg::{BandSpec, CovarianceMatrix};
use crate::posterior::{
    banding_post_process, conjugate_update, draw_initial_samples, dual_post_process, PosteriorSampleSet,
};
use crate::sampling::{DataMatrix, IwParams, SeedSpec};
use crate::selection::{select_bandwidth, select_epsilon_with, select_frequentist, CvGrid, EpsPolicy, LooEngine};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorId {
    /// Banding post-processed posterior, floor tuned by Bayesian LOO.
    Ppp,
    /// Same draws as `Ppp`; intervals are HPD instead of equal-tailed.
    PppHpd,
    DualPpp,
    /// Unprocessed inverse-Wishart posterior.
    IwPosterior,
    BandedSample,
    Sample,
    DualMle,
    MleIcf,
    /// Returns the truth; a harness self-check.
    Oracle,
}

impl EstimatorId {
    pub fn label(&self) -> &'static str {
        match self {
            EstimatorId::Ppp => "ppp",
            EstimatorId::PppHpd => "ppp-hpd",
            EstimatorId::DualPpp => "dual-ppp",
            EstimatorId::IwPosterior => "iw-posterior",
            EstimatorId::BandedSample => "banded-sample",
            EstimatorId::Sample => "sample",
            EstimatorId::DualMle => "dual-mle",
            EstimatorId::MleIcf => "mle-icf",
            EstimatorId::Oracle => "oracle",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::invalid(format!("unknown estimator '{s}'")))
    }

    pub fn is_bayesian(&self) -> bool {
        matches!(
            self,
            EstimatorId::Ppp | EstimatorId::PppHpd | EstimatorId::DualPpp | EstimatorId::IwPosterior
        )
    }
}

/// Whether the bandwidth is given or chosen by cross-validation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BandwidthPolicy {
    Known,
    Cv,
}

/// How the PPP floor is chosen once the bandwidth is fixed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "rule", content = "value")]
pub enum EpsChoice {
    Cv,
    Theoretical,
    Fixed(f64),
}

/// Everything an estimator needs besides the data.
#[derive(Clone, Debug)]
pub struct FitSettings {
    pub bandwidth: Option<usize>,
    pub grid: CvGrid,
    pub eps: EpsChoice,
    pub prior: IwParams,
    pub draws: usize,
    pub seed: SeedSpec,
    pub dual_tol: f64,
}

impl FitSettings {
    pub fn new(p: usize, bandwidth: Option<usize>, draws: usize, seed: SeedSpec) -> Self {
        Self {
            bandwidth,
            grid: CvGrid::default_for(p),
            eps: EpsChoice::Cv,
            prior: IwParams::default_prior(p),
            draws,
            seed,
            dual_tol: DEFAULT_TOL,
        }
    }
}

/// A fitted estimator: the point estimate, optional posterior draws, and the
/// tuning values that were used.
#[derive(Clone, Debug)]
pub struct Fit {
    pub estimate: CovarianceMatrix,
    pub draws: Option<PosteriorSampleSet>,
    pub bandwidth: Option<usize>,
    pub eps: Option<f64>,
}

/// Draws from the initial posterior and resolves `(k, eps)` for the banding
/// post-processing, by cross-validation where requested.
pub fn tune_ppp(data: &DataMatrix, settings: &FitSettings) -> Result<(PosteriorSampleSet, usize, f64)> {
    let p = data.p();
    let post = conjugate_update(&settings.prior, data)?;
    let initial = draw_initial_samples(&post, settings.draws, settings.seed)?;
    let (k, eps) = match settings.bandwidth {
        Some(k) => {
            let spec = BandSpec::new(k, p)?;
            let eps = match &settings.eps {
                EpsChoice::Fixed(e) => *e,
                EpsChoice::Theoretical => crate::posterior::default_epsilon(k, p, data.n()),
                EpsChoice::Cv => {
                    let engine = LooEngine::new(&initial, data, &settings.prior)?;
                    select_epsilon_with(&engine, spec, &settings.grid.epsilon_values)?.selected
                }
            };
            (k, eps)
        }
        None => {
            let policy = match &settings.eps {
                EpsChoice::Fixed(e) => EpsPolicy::Fixed(*e),
                EpsChoice::Theoretical => EpsPolicy::Theoretical,
                EpsChoice::Cv => EpsPolicy::Nested(settings.grid.epsilon_values.clone()),
            };
            let report = select_bandwidth(&initial, data, &settings.grid, &settings.prior, &policy)?;
            let eps = report.selected_eps.expect("bandwidth reports carry the floor");
            (report.selected, eps)
        }
    };
    Ok((initial, k, eps))
}

/// Bayesian bandwidth choice shared by the dual post-processing when the
/// bandwidth is not known.
fn resolve_bandwidth(data: &DataMatrix, settings: &FitSettings, initial: &PosteriorSampleSet) -> Result<usize> {
    match settings.bandwidth {
        Some(k) => Ok(k),
        None => {
            let policy = EpsPolicy::Nested(settings.grid.epsilon_values.clone());
            Ok(select_bandwidth(initial, data, &settings.grid, &settings.prior, &policy)?.selected)
        }
    }
}

fn ridge_estimator(
    k: usize,
    eps: f64,
    id: EstimatorId,
    tol: f64,
) -> impl Fn(&DataMatrix) -> Result<CovarianceMatrix> + Sync {
    move |d: &DataMatrix| {
        let spec = BandSpec::new(k, d.p())?;
        let s = ridge_adjusted_cov(d, eps)?;
        match id {
            EstimatorId::DualMle => dual_mle(&s, spec, tol, DEFAULT_MAX_ITER),
            _ => mle_icf(&s, spec, tol, DEFAULT_MAX_ITER),
        }
    }
}

/// Fits `id` to `data`. `truth` is only consulted by the oracle.
pub fn fit_estimator(
    id: EstimatorId,
    data: &DataMatrix,
    settings: &FitSettings,
    truth: Option<&CovarianceMatrix>,
) -> Result<Fit> {
    let p = data.p();
    match id {
        EstimatorId::Ppp | EstimatorId::PppHpd => {
            let (initial, k, eps) = tune_ppp(data, settings)?;
            let processed = banding_post_process(&initial, BandSpec::new(k, p)?, eps)?;
            Ok(Fit {
                estimate: crate::posterior::posterior_mean(&processed)?,
                draws: Some(processed),
                bandwidth: Some(k),
                eps: Some(eps),
            })
        }
        EstimatorId::DualPpp => {
            let post = conjugate_update(&settings.prior, data)?;
            let initial = draw_initial_samples(&post, settings.draws, settings.seed)?;
            let k = resolve_bandwidth(data, settings, &initial)?;
            let processed = dual_post_process(&initial, BandSpec::new(k, p)?, settings.dual_tol)?;
            Ok(Fit {
                estimate: crate::posterior::posterior_mean(&processed)?,
                draws: Some(processed),
                bandwidth: Some(k),
                eps: None,
            })
        }
        EstimatorId::IwPosterior => {
            let post = conjugate_update(&settings.prior, data)?;
            let initial = draw_initial_samples(&post, settings.draws, settings.seed)?;
            Ok(Fit {
                estimate: crate::posterior::posterior_mean(&initial)?,
                draws: Some(initial),
                bandwidth: None,
                eps: None,
            })
        }
        EstimatorId::Sample => Ok(Fit {
            estimate: sample_cov(data),
            draws: None,
            bandwidth: None,
            eps: None,
        }),
        EstimatorId::BandedSample => {
            let k = match settings.bandwidth {
                Some(k) => k,
                None => {
                    let ks = &settings.grid.bandwidth_values;
                    select_frequentist(ks, data, |k| move |d: &DataMatrix| banded_sample_cov(d, BandSpec::new(k, d.p())?))?
                        .selected
                }
            };
            Ok(Fit {
                estimate: banded_sample_cov(data, BandSpec::new(k, p)?)?,
                draws: None,
                bandwidth: Some(k),
                eps: None,
            })
        }
        EstimatorId::DualMle | EstimatorId::MleIcf => {
            let tol = settings.dual_tol;
            let (k, eps) = match settings.bandwidth {
                Some(k) => {
                    let eps = select_frequentist(&settings.grid.epsilon_values, data, |e| ridge_estimator(k, e, id, tol))?
                        .selected;
                    (k, eps)
                }
                None => {
                    let pairs: Vec<(usize, f64)> = settings
                        .grid
                        .bandwidth_values
                        .iter()
                        .flat_map(|&k| settings.grid.epsilon_values.iter().map(move |&e| (k, e)))
                        .collect();
                    select_frequentist(&pairs, data, |(k, e)| ridge_estimator(k, e, id, tol))?.selected
                }
            };
            Ok(Fit {
                estimate: ridge_estimator(k, eps, id, tol)(data)?,
                draws: None,
                bandwidth: Some(k),
                eps: Some(eps),
            })
        }
        EstimatorId::Oracle => {
            let truth = truth.ok_or_else(|| Error::invalid("the oracle estimator needs the truth"))?;
            Ok(Fit {
                estimate: truth.clone(),
                draws: None,
                bandwidth: None,
                eps: None,
            })
        }
    }
}
