//! Monte Carlo experiments: point-estimation error tables, interval coverage
//! tables, posterior P-loss, and wall-clock summaries.
//!
//! Every replication draws its randomness from
//! `SeedSpec::new(seed).child(n).child(replication)`, so results are
//! reproducible and independent of scheduling. Data for a replication are
//! shared by all estimators in that cell.

mod estimators;
mod truth;

pub use estimators::{fit_estimator, tune_ppp, BandwidthPolicy, EpsChoice, EstimatorId, Fit, FitSettings};
pub use truth::{make_sigma1, make_sigma2, make_sigma3, make_truth, TrueCovKind, TrueCovSpec};

use std::time::Instant;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frequentist::{mle_icf, ridge_adjusted_cov, DEFAULT_MAX_ITER, DEFAULT_TOL};
use crate::inference::{delta_method_ci, hpd_interval, quantile_credible_interval, BandIndexMap, Functional, IntervalEstimate};
use crate::linalg::{extreme_eigenvalues, spectral_norm, BandSpec, CovarianceMatrix};
use crate::posterior::PosteriorSampleSet;
use crate::sampling::{sample_mvn, DataMatrix, SeedSpec};
use crate::selection::{default_epsilon_grid, select_frequentist, CvGrid};

/// Cells with more than this fraction of failed replications are incomplete.
const MAX_FAILURE_FRACTION: f64 = 0.05;

fn default_draws() -> usize {
    500
}

fn default_level() -> f64 {
    0.95
}

fn default_policy() -> BandwidthPolicy {
    BandwidthPolicy::Known
}

fn default_eps_choice() -> EpsChoice {
    EpsChoice::Cv
}

/// One simulation study: a truth, sample sizes, estimators and replications.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub true_cov: TrueCovSpec,
    pub n_values: Vec<usize>,
    pub replications: usize,
    pub estimators: Vec<EstimatorId>,
    #[serde(default = "default_draws")]
    pub posterior_draws: usize,
    #[serde(default = "default_policy")]
    pub bandwidth_policy: BandwidthPolicy,
    pub seed: u64,
    #[serde(default = "default_eps_choice")]
    pub eps: EpsChoice,
    #[serde(default)]
    pub eps_grid: Option<Vec<f64>>,
    #[serde(default)]
    pub bandwidth_grid: Option<Vec<usize>>,
    /// Nominal level for interval experiments.
    #[serde(default = "default_level")]
    pub level: f64,
}

impl ExperimentConfig {
    pub fn new(true_cov: TrueCovSpec, n_values: Vec<usize>, replications: usize, estimators: Vec<EstimatorId>, seed: u64) -> Self {
        Self {
            true_cov,
            n_values,
            replications,
            estimators,
            posterior_draws: default_draws(),
            bandwidth_policy: default_policy(),
            seed,
            eps: default_eps_choice(),
            eps_grid: None,
            bandwidth_grid: None,
            level: default_level(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.true_cov.validate()?;
        if self.replications == 0 {
            return Err(Error::invalid("replications must be at least 1"));
        }
        if self.n_values.is_empty() || self.n_values.contains(&0) {
            return Err(Error::invalid("n_values must be nonempty and positive"));
        }
        if self.estimators.is_empty() {
            return Err(Error::invalid("no estimators requested"));
        }
        if self.posterior_draws == 0 {
            return Err(Error::invalid("posterior_draws must be positive"));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::invalid("level must lie in (0, 1)"));
        }
        self.grid()?;
        Ok(())
    }

    fn grid(&self) -> Result<CvGrid> {
        let p = self.true_cov.p;
        let default = CvGrid::default_for(p);
        CvGrid::new(
            self.eps_grid.clone().unwrap_or_else(default_epsilon_grid),
            self.bandwidth_grid.clone().unwrap_or(default.bandwidth_values),
        )
    }

    fn settings(&self, seed: SeedSpec) -> Result<FitSettings> {
        let p = self.true_cov.p;
        let bandwidth = match self.bandwidth_policy {
            BandwidthPolicy::Known => Some(self.true_cov.k0),
            BandwidthPolicy::Cv => None,
        };
        let mut s = FitSettings::new(p, bandwidth, self.posterior_draws, seed);
        s.grid = self.grid()?;
        s.eps = self.eps.clone();
        Ok(s)
    }
}

/// Outcome of one estimator on one replication.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub n: usize,
    pub replication: usize,
    pub estimator: EstimatorId,
    pub spectral_error: Option<f64>,
    pub covered: Option<bool>,
    pub interval_length: Option<f64>,
    pub bandwidth: Option<usize>,
    pub eps: Option<f64>,
    pub seconds: f64,
    pub failure: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub first_quartile: f64,
    pub mean: f64,
    pub median: f64,
    pub third_quartile: f64,
}

impl TimingStats {
    pub fn from_seconds(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |prob: f64| {
            let h = (v.len() - 1) as f64 * prob;
            let lo = h.floor() as usize;
            let hi = (lo + 1).min(v.len() - 1);
            v[lo] + (h - lo as f64) * (v[hi] - v[lo])
        };
        Some(Self {
            first_quartile: q(0.25),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            median: q(0.5),
            third_quartile: q(0.75),
        })
    }
}

/// Aggregates over the replications of one `(truth, n, estimator)` cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub truth: TrueCovKind,
    pub n: usize,
    pub estimator: EstimatorId,
    pub completed: usize,
    pub failures: usize,
    pub incomplete: bool,
    pub mean_spectral_error: Option<f64>,
    pub coverage: Option<f64>,
    pub mean_interval_length: Option<f64>,
    pub timing: Option<TimingStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub truth_lambda_min: f64,
    pub truth_lambda_max: f64,
    pub cells: Vec<CellSummary>,
    pub records: Vec<ReplicationRecord>,
}

impl ExperimentResult {
    pub fn cell(&self, n: usize, estimator: EstimatorId) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.n == n && c.estimator == estimator)
    }

    /// Copy with every wall-clock field zeroed, for reproducibility checks.
    pub fn without_timings(&self) -> Self {
        let mut out = self.clone();
        for r in &mut out.records {
            r.seconds = 0.0;
        }
        for c in &mut out.cells {
            c.timing = None;
        }
        out
    }
}

/// Cell summaries recomputed from per-replication records.
pub fn summarize(truth: TrueCovKind, config: &ExperimentConfig, records: &[ReplicationRecord]) -> Vec<CellSummary> {
    let mut cells = Vec::new();
    for &n in &config.n_values {
        for &est in &config.estimators {
            let rows: Vec<&ReplicationRecord> = records.iter().filter(|r| r.n == n && r.estimator == est).collect();
            let ok: Vec<&&ReplicationRecord> = rows.iter().filter(|r| r.failure.is_none()).collect();
            let failures = rows.len() - ok.len();
            let mean = |vals: Vec<f64>| (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
            let errors: Vec<f64> = ok.iter().filter_map(|r| r.spectral_error).collect();
            let covered: Vec<f64> = ok
                .iter()
                .filter_map(|r| r.covered.map(|c| if c { 1.0 } else { 0.0 }))
                .collect();
            let lengths: Vec<f64> = ok.iter().filter_map(|r| r.interval_length).collect();
            let secs: Vec<f64> = ok.iter().map(|r| r.seconds).collect();
            cells.push(CellSummary {
                truth,
                n,
                estimator: est,
                completed: ok.len(),
                failures,
                incomplete: !rows.is_empty() && failures as f64 > MAX_FAILURE_FRACTION * rows.len() as f64,
                mean_spectral_error: mean(errors),
                coverage: mean(covered),
                mean_interval_length: mean(lengths),
                timing: TimingStats::from_seconds(&secs),
            });
        }
    }
    cells
}

/// Posterior expected spectral distance to `truth`, averaged over draws.
pub fn posterior_ploss(s: &PosteriorSampleSet, truth: &CovarianceMatrix) -> Result<f64> {
    let d = distances(s, truth)?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

/// Posterior expected squared spectral distance to `truth`.
pub fn posterior_sq_ploss(s: &PosteriorSampleSet, truth: &CovarianceMatrix) -> Result<f64> {
    let d = distances(s, truth)?;
    Ok(d.iter().map(|x| x * x).sum::<f64>() / d.len() as f64)
}

fn distances(s: &PosteriorSampleSet, truth: &CovarianceMatrix) -> Result<Vec<f64>> {
    if truth.dim() != s.dim() {
        return Err(Error::DimensionMismatch {
            expected: s.dim(),
            found: truth.dim(),
        });
    }
    s.draws().par_iter().map(|d| spectral_norm(&(truth - d))).collect()
}

struct ReplicationInput {
    n: usize,
    replication: usize,
    data: DataMatrix,
    seed: SeedSpec,
    x_head: DVector<f64>,
}

fn replication_inputs(config: &ExperimentConfig, truth: &CovarianceMatrix) -> Result<Vec<ReplicationInput>> {
    let root = SeedSpec::new(config.seed);
    let p = truth.dim();
    let mut out = Vec::new();
    for &n in &config.n_values {
        for r in 0..config.replications {
            let seed = root.child(n as u64).child(r as u64);
            let data = sample_mvn(truth, n, seed.child(0))?;
            let extra = sample_mvn(truth, 1, seed.child(1))?;
            let x_head = extra.row(0).rows(0, p.saturating_sub(1)).into_owned();
            out.push(ReplicationInput {
                n,
                replication: r,
                data,
                seed: seed.child(2),
                x_head,
            });
        }
    }
    Ok(out)
}

fn run_cells<F>(config: &ExperimentConfig, truth: &CovarianceMatrix, per_estimator: F) -> Result<ExperimentResult>
where
    F: Fn(EstimatorId, &ReplicationInput, &FitSettings) -> Result<ReplicationRecord> + Sync,
{
    config.validate()?;
    let inputs = replication_inputs(config, truth)?;
    let nested = inputs
        .par_iter()
        .map(|input| {
            let settings = config.settings(input.seed)?;
            Ok(config
                .estimators
                .iter()
                .map(|&est| {
                    let started = Instant::now();
                    let result = per_estimator(est, input, &settings);
                    let seconds = started.elapsed().as_secs_f64();
                    match result {
                        Ok(mut rec) => {
                            rec.seconds = seconds;
                            rec
                        }
                        Err(e) => ReplicationRecord {
                            n: input.n,
                            replication: input.replication,
                            estimator: est,
                            spectral_error: None,
                            covered: None,
                            interval_length: None,
                            bandwidth: None,
                            eps: None,
                            seconds,
                            failure: Some(e.to_string()),
                        },
                    }
                })
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let records: Vec<ReplicationRecord> = nested.into_iter().flatten().collect();
    let (lo, hi) = extreme_eigenvalues(truth)?;
    Ok(ExperimentResult {
        cells: summarize(config.true_cov.kind, config, &records),
        config: config.clone(),
        truth_lambda_min: lo,
        truth_lambda_max: hi,
        records,
    })
}

/// Mean spectral-norm error of each estimator's point estimate.
pub fn run_point_estimation(config: &ExperimentConfig) -> Result<ExperimentResult> {
    let truth = make_truth(&config.true_cov)?;
    run_cells(config, &truth, |est, input, settings| {
        let fit = fit_estimator(est, &input.data, settings, Some(&truth))?;
        Ok(ReplicationRecord {
            n: input.n,
            replication: input.replication,
            estimator: est,
            spectral_error: Some(spectral_norm(&(&truth - &fit.estimate))?),
            covered: None,
            interval_length: None,
            bandwidth: fit.bandwidth,
            eps: fit.eps,
            seconds: 0.0,
            failure: None,
        })
    })
}

/// Wall-clock summaries per estimator. Bayesian estimators include their
/// cross-validation steps; each estimator draws its own posterior sample.
pub fn timing_summary(config: &ExperimentConfig) -> Result<ExperimentResult> {
    run_point_estimation(config)
}

/// Coverage and mean length of level-`config.level` intervals for
/// `functional`, conditioning on a fresh draw from the truth in every
/// replication.
pub fn run_interval_experiment(config: &ExperimentConfig, functional: &Functional) -> Result<ExperimentResult> {
    let truth = make_truth(&config.true_cov)?;
    let level = config.level;
    run_cells(config, &truth, |est, input, settings| {
        let x = Some(&input.x_head);
        let target = functional.evaluate(&truth, x)?;
        let (interval, fit) = interval_for(est, input, settings, functional, &truth, level)?;
        Ok(ReplicationRecord {
            n: input.n,
            replication: input.replication,
            estimator: est,
            spectral_error: None,
            covered: Some(interval.contains(target)),
            interval_length: Some(interval.length()),
            bandwidth: fit.bandwidth,
            eps: fit.eps,
            seconds: 0.0,
            failure: None,
        })
    })
}

fn interval_for(
    est: EstimatorId,
    input: &ReplicationInput,
    settings: &FitSettings,
    functional: &Functional,
    truth: &CovarianceMatrix,
    level: f64,
) -> Result<(IntervalEstimate, Fit)> {
    let x = Some(&input.x_head);
    match est {
        EstimatorId::Ppp | EstimatorId::PppHpd | EstimatorId::DualPpp | EstimatorId::IwPosterior => {
            let fit = fit_estimator(est, &input.data, settings, None)?;
            let draws = fit.draws.as_ref().expect("Bayesian fits keep their draws");
            let values = functional.evaluate_draws(draws, x)?;
            let interval = if est == EstimatorId::PppHpd {
                hpd_interval(&values, level)?
            } else {
                quantile_credible_interval(&values, level)?
            };
            Ok((interval, fit))
        }
        EstimatorId::MleIcf => {
            let p = input.data.p();
            let k = settings
                .bandwidth
                .ok_or_else(|| Error::invalid("delta-method intervals need a known bandwidth"))?;
            let spec = BandSpec::new(k, p)?;
            let eps = select_frequentist(&settings.grid.epsilon_values, &input.data, |e| {
                move |d: &DataMatrix| mle_icf(&ridge_adjusted_cov(d, e)?, BandSpec::new(k, d.p())?, DEFAULT_TOL, DEFAULT_MAX_ITER)
            })?
            .selected;
            let estimate = mle_icf(&ridge_adjusted_cov(&input.data, eps)?, spec, DEFAULT_TOL, DEFAULT_MAX_ITER)?;
            let interval = delta_method_ci(&estimate, &BandIndexMap::new(spec), input.data.n(), functional, level, x)?;
            Ok((
                interval,
                Fit {
                    estimate,
                    draws: None,
                    bandwidth: Some(k),
                    eps: Some(eps),
                },
            ))
        }
        EstimatorId::Oracle => {
            let v = functional.evaluate(truth, x)?;
            Ok((
                IntervalEstimate {
                    lower: v,
                    upper: v,
                    level,
                    method: crate::inference::IntervalMethod::Quantile,
                },
                Fit {
                    estimate: truth.clone(),
                    draws: None,
                    bandwidth: None,
                    eps: None,
                },
            ))
        }
        other => Err(Error::invalid(format!("{} does not produce intervals", other.label()))),
    }
}

/// Which cell statistic a table reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TableMetric {
    MeanSpectralError,
    Coverage,
    MeanIntervalLength,
    MeanSeconds,
}

/// Flat CSV with one row per estimator and one column per `(truth, n)`.
pub fn results_table_csv(results: &[ExperimentResult], metric: TableMetric) -> String {
    let mut columns: Vec<(TrueCovKind, usize)> = Vec::new();
    let mut rows: Vec<EstimatorId> = Vec::new();
    for r in results {
        for c in &r.cells {
            if !columns.contains(&(c.truth, c.n)) {
                columns.push((c.truth, c.n));
            }
            if !rows.contains(&c.estimator) {
                rows.push(c.estimator);
            }
        }
    }
    let mut out = String::from("estimator");
    for (t, n) in &columns {
        out.push_str(&format!(",{}/n={}", t.label(), n));
    }
    out.push('\n');
    for est in rows {
        out.push_str(est.label());
        for (t, n) in &columns {
            let cell = results
                .iter()
                .flat_map(|r| r.cells.iter())
                .find(|c| c.truth == *t && c.n == *n && c.estimator == est);
            let value = cell.and_then(|c| match metric {
                TableMetric::MeanSpectralError => c.mean_spectral_error,
                TableMetric::Coverage => c.coverage,
                TableMetric::MeanIntervalLength => c.mean_interval_length,
                TableMetric::MeanSeconds => c.timing.as_ref().map(|t| t.mean),
            });
            match value {
                Some(v) => out.push_str(&format!(",{v:.6}")),
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}
