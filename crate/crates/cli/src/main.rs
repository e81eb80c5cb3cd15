//! `bandpost` command-line front end.
//!
//! Exit status: 0 on success, 2 for usage or configuration problems, 3 for
//! numerical or convergence failures.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use bandpost::harness::{
    fit_estimator, results_table_csv, run_interval_experiment, run_point_estimation, EpsChoice, EstimatorId,
    ExperimentConfig, ExperimentResult, FitSettings, TableMetric,
};
use bandpost::inference::Functional;
use bandpost::io::{
    read_csv_matrix, save_sample_set, unix_seconds, write_covariance, write_csv_matrix, write_json, FitManifest,
    PriorSummary, Timestamps,
};
use bandpost::prediction::{
    center_with_leading_rows, evaluate_task, predict_tail_intervals, transform_counts, PredictionTask,
};
use bandpost::selection::{select_bandwidth, select_epsilon_with, CvGrid, EpsPolicy, LooEngine};
use bandpost::{conjugate_update, draw_initial_samples, BandSpec, DataMatrix, Error, IwParams, SeedSpec};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "bandpost", version, about = "Banded covariance estimation by post-processed posteriors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// `K` or `cv`.
#[derive(Clone, Copy, Debug, PartialEq)]
enum BandwidthArg {
    Fixed(usize),
    Cv,
}

impl FromStr for BandwidthArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "cv" {
            return Ok(Self::Cv);
        }
        s.parse().map(Self::Fixed).map_err(|_| format!("expected a bandwidth or 'cv', got '{s}'"))
    }
}

/// `VAL`, `cv`, or `theory`.
#[derive(Clone, Debug, PartialEq)]
struct EpsArg(EpsChoice);

impl FromStr for EpsArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "cv" => Ok(Self(EpsChoice::Cv)),
            "theory" => Ok(Self(EpsChoice::Theoretical)),
            _ => match s.parse::<f64>() {
                Ok(v) if v > 0.0 && v.is_finite() => Ok(Self(EpsChoice::Fixed(v))),
                _ => Err(format!("expected a positive floor, 'cv' or 'theory', got '{s}'")),
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, clap::ValueEnum)]
enum Method {
    Ppp,
    DualPpp,
    BandedSample,
    DualMle,
    MleIcf,
    Sample,
}

impl Method {
    fn id(self) -> EstimatorId {
        match self {
            Method::Ppp => EstimatorId::Ppp,
            Method::DualPpp => EstimatorId::DualPpp,
            Method::BandedSample => EstimatorId::BandedSample,
            Method::DualMle => EstimatorId::DualMle,
            Method::MleIcf => EstimatorId::MleIcf,
            Method::Sample => EstimatorId::Sample,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, clap::ValueEnum)]
enum Experiment {
    /// Spectral-norm error of point estimates.
    Point,
    /// Coverage and length of intervals for the conditional mean.
    Interval,
}

#[derive(clap::Args, Clone, Debug)]
struct Tuning {
    /// Bandwidth, or `cv` to select it by leave-one-out cross-validation.
    #[arg(long, default_value = "cv")]
    bandwidth: BandwidthArg,
    /// Eigenvalue floor: a positive value, `cv`, or `theory`.
    #[arg(long, default_value = "cv")]
    eps: EpsArg,
    /// Posterior draws for Bayesian methods.
    #[arg(long, default_value_t = 500)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "ppp")]
    method: Method,
    /// Comma-separated floor grid for cross-validation.
    #[arg(long, value_delimiter = ',')]
    grid_eps: Option<Vec<f64>>,
    /// Comma-separated bandwidth grid for cross-validation.
    #[arg(long, value_delimiter = ',')]
    grid_k: Option<Vec<usize>>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one or more simulation studies described by a JSON config.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "point")]
        experiment: Experiment,
    },
    /// Fit a banded covariance estimate to a data CSV.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        tuning: Tuning,
        /// Subtract column means before fitting.
        #[arg(long)]
        center: bool,
        /// Also write the processed posterior draws.
        #[arg(long)]
        save_draws: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict trailing coordinates of held-out rows from leading ones.
    Predict {
        #[arg(long)]
        data: PathBuf,
        /// Number of observed leading coordinates.
        #[arg(long)]
        split: usize,
        /// Rows used for fitting; the rest are predicted. Defaults to 6/7 of the rows.
        #[arg(long)]
        train_rows: Option<usize>,
        /// Treat the data as raw counts and apply the square-root transform.
        #[arg(long)]
        counts: bool,
        #[arg(long, default_value_t = 0.95)]
        level: f64,
        #[command(flatten)]
        tuning: Tuning,
        #[arg(long)]
        out: PathBuf,
    },
    /// Report leave-one-out scores over floor and bandwidth grids.
    Cv {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',')]
        grid_eps: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        grid_k: Option<Vec<usize>>,
        #[arg(long, default_value_t = 500)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ConfigFile {
    One(ExperimentConfig),
    Many(Vec<ExperimentConfig>),
}

fn settings_for(tuning: &Tuning, p: usize) -> bandpost::Result<FitSettings> {
    let bandwidth = match tuning.bandwidth {
        BandwidthArg::Fixed(k) => {
            BandSpec::new(k, p)?;
            Some(k)
        }
        BandwidthArg::Cv => None,
    };
    if tuning.samples == 0 {
        return Err(Error::InvalidArgument("--samples must be positive".into()));
    }
    let mut s = FitSettings::new(p, bandwidth, tuning.samples, SeedSpec::new(tuning.seed));
    s.grid = grid_for(p, tuning.grid_eps.clone(), tuning.grid_k.clone())?;
    s.eps = tuning.eps.0.clone();
    Ok(s)
}

fn grid_for(p: usize, eps: Option<Vec<f64>>, ks: Option<Vec<usize>>) -> bandpost::Result<CvGrid> {
    let default = CvGrid::default_for(p);
    let grid = CvGrid::new(
        eps.unwrap_or(default.epsilon_values),
        ks.unwrap_or(default.bandwidth_values),
    )?;
    for &k in &grid.bandwidth_values {
        BandSpec::new(k, p)?;
    }
    Ok(grid)
}

fn manifest(method: Method, fit: &bandpost::harness::Fit, seed: u64, data: &DataMatrix, started: f64) -> FitManifest {
    let p = data.p();
    FitManifest {
        method: method.id().label().to_string(),
        bandwidth: fit.bandwidth,
        eps: fit.eps,
        seed,
        n: data.n(),
        p,
        prior: PriorSummary {
            scale: "identity".into(),
            nu: IwParams::default_prior(p).df(),
        },
        timestamps: Timestamps {
            started,
            finished: unix_seconds(),
        },
    }
}

fn simulate(config: &Path, out: &Path, experiment: Experiment) -> bandpost::Result<()> {
    let parsed: ConfigFile = serde_json::from_str(&fs::read_to_string(config)?)?;
    let configs = match parsed {
        ConfigFile::One(c) => vec![c],
        ConfigFile::Many(cs) => cs,
    };
    for c in &configs {
        c.validate()?;
    }
    let results = configs
        .iter()
        .map(|c| match experiment {
            Experiment::Point => run_point_estimation(c),
            Experiment::Interval => run_interval_experiment(c, &Functional::conditional_mean()),
        })
        .collect::<bandpost::Result<Vec<ExperimentResult>>>()?;
    fs::create_dir_all(out)?;
    write_json(&out.join("results.json"), &results)?;
    let tables: &[(&str, TableMetric)] = match experiment {
        Experiment::Point => &[("errors.csv", TableMetric::MeanSpectralError), ("timing.csv", TableMetric::MeanSeconds)],
        Experiment::Interval => &[
            ("coverage.csv", TableMetric::Coverage),
            ("lengths.csv", TableMetric::MeanIntervalLength),
            ("timing.csv", TableMetric::MeanSeconds),
        ],
    };
    for (name, metric) in tables {
        fs::write(out.join(name), results_table_csv(&results, *metric))?;
    }
    for r in &results {
        for c in r.cells.iter().filter(|c| c.incomplete) {
            eprintln!(
                "warning: {}/n={}/{} incomplete ({} failures)",
                c.truth.label(),
                c.n,
                c.estimator.label(),
                c.failures
            );
        }
    }
    Ok(())
}

fn fit(data: &Path, tuning: &Tuning, center: bool, save_draws: bool, out: &Path) -> bandpost::Result<()> {
    let started = unix_seconds();
    let raw = read_csv_matrix(data)?;
    let n = raw.nrows();
    let data = if center { center_with_leading_rows(raw, n)? } else { DataMatrix::new(raw)? };
    let settings = settings_for(tuning, data.p())?;
    let fitted = fit_estimator(tuning.method.id(), &data, &settings, None)?;
    fs::create_dir_all(out)?;
    write_covariance(&out.join("estimate.csv"), &fitted.estimate)?;
    if save_draws {
        if let Some(draws) = &fitted.draws {
            save_sample_set(&out.join("draws"), draws)?;
        }
    }
    write_json(&out.join("manifest.json"), &manifest(tuning.method, &fitted, tuning.seed, &data, started))?;
    Ok(())
}

#[derive(Serialize)]
struct PredictSummary {
    fit: FitManifest,
    split: usize,
    train_rows: usize,
    test_rows: usize,
    mse: f64,
    /// Share of held-out coordinates inside their intervals, reported only.
    interval_coverage: Option<f64>,
    level: f64,
}

#[allow(clippy::too_many_arguments)]
fn predict(
    data: &Path,
    split: usize,
    train_rows: Option<usize>,
    counts: bool,
    level: f64,
    tuning: &Tuning,
    out: &Path,
) -> bandpost::Result<()> {
    let started = unix_seconds();
    let raw = read_csv_matrix(data)?;
    let (n, p) = raw.shape();
    if split == 0 || split >= p {
        return Err(Error::InvalidArgument(format!("--split must satisfy 1 <= M < p = {p}, got {split}")));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidArgument("--level must lie in (0, 1)".into()));
    }
    let train_rows = train_rows.unwrap_or(n * 6 / 7);
    if train_rows == 0 || train_rows >= n {
        return Err(Error::InvalidArgument(format!(
            "--train-rows must leave at least one training and one test row, got {train_rows} of {n}"
        )));
    }
    let data = if counts {
        transform_counts(&raw, train_rows)?
    } else {
        center_with_leading_rows(raw, train_rows)?
    };
    let task = PredictionTask::new(&data, split, train_rows)?;
    let settings = settings_for(tuning, p)?;
    let fitted = fit_estimator(tuning.method.id(), task.train(), &settings, None)?;
    let (predicted, mse) = evaluate_task(&fitted.estimate, &task)?;

    fs::create_dir_all(out)?;
    let tail = p - split;
    let pred_matrix = bandpost::io::rows_to_matrix(&predicted, tail);
    write_csv_matrix(&out.join("predictions.csv"), &pred_matrix)?;
    write_covariance(&out.join("estimate.csv"), &fitted.estimate)?;

    let mut interval_coverage = None;
    if let Some(draws) = &fitted.draws {
        let pairs = task.test_pairs();
        let mut lower = Vec::with_capacity(pairs.len());
        let mut upper = Vec::with_capacity(pairs.len());
        let mut hits = 0usize;
        for (head, truth) in &pairs {
            let intervals = predict_tail_intervals(draws, split, head, level)?;
            hits += intervals.iter().zip(truth.iter()).filter(|(iv, t)| iv.contains(**t)).count();
            lower.push(intervals.iter().map(|iv| iv.lower).collect::<Vec<_>>().into());
            upper.push(intervals.iter().map(|iv| iv.upper).collect::<Vec<_>>().into());
        }
        write_csv_matrix(&out.join("lower.csv"), &bandpost::io::rows_to_matrix(&lower, tail))?;
        write_csv_matrix(&out.join("upper.csv"), &bandpost::io::rows_to_matrix(&upper, tail))?;
        interval_coverage = Some(hits as f64 / (pairs.len() * tail) as f64);
    }
    let summary = PredictSummary {
        fit: manifest(tuning.method, &fitted, tuning.seed, task.train(), started),
        split,
        train_rows,
        test_rows: n - train_rows,
        mse,
        interval_coverage,
        level,
    };
    write_json(&out.join("summary.json"), &summary)?;
    println!("prediction mse {mse:.6}");
    Ok(())
}

#[derive(Serialize)]
struct FloorReport {
    bandwidth: usize,
    report: bandpost::selection::CvReport<f64>,
}

#[derive(Serialize)]
struct CvOutput {
    bandwidth: bandpost::selection::CvReport<usize>,
    floors: Vec<FloorReport>,
}

fn cv(
    data: &Path,
    grid_eps: Option<Vec<f64>>,
    grid_k: Option<Vec<usize>>,
    samples: usize,
    seed: u64,
    out: &Path,
) -> bandpost::Result<()> {
    let data = DataMatrix::new(read_csv_matrix(data)?)?;
    let p = data.p();
    if samples == 0 {
        return Err(Error::InvalidArgument("--samples must be positive".into()));
    }
    let grid = grid_for(p, grid_eps, grid_k)?;
    let prior = IwParams::default_prior(p);
    let initial = draw_initial_samples(&conjugate_update(&prior, &data)?, samples, SeedSpec::new(seed))?;
    let engine = LooEngine::new(&initial, &data, &prior)?;
    let floors = grid
        .bandwidth_values
        .iter()
        .map(|&k| {
            Ok(FloorReport {
                bandwidth: k,
                report: select_epsilon_with(&engine, BandSpec::new(k, p)?, &grid.epsilon_values)?,
            })
        })
        .collect::<bandpost::Result<Vec<_>>>()?;
    let bandwidth = select_bandwidth(&initial, &data, &grid, &prior, &EpsPolicy::Nested(grid.epsilon_values.clone()))?;
    if let Some(parent) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_json(out, &CvOutput { bandwidth, floors })?;
    Ok(())
}

fn run(cli: Cli) -> bandpost::Result<()> {
    match cli.command {
        Command::Simulate { config, out, experiment } => simulate(&config, &out, experiment),
        Command::Fit {
            data,
            tuning,
            center,
            save_draws,
            out,
        } => fit(&data, &tuning, center, save_draws, &out),
        Command::Predict {
            data,
            split,
            train_rows,
            counts,
            level,
            tuning,
            out,
        } => predict(&data, split, train_rows, counts, level, &tuning, &out),
        Command::Cv {
            data,
            grid_eps,
            grid_k,
            samples,
            seed,
            out,
        } => cv(&data, grid_eps, grid_k, samples, seed, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config_error() { 2 } else { 3 })
        }
    }
}
