//! Predicting the trailing coordinates of an observation from its leading
//! ones, plus the count transform used for arrival-count data.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::inference::{quantile_credible_interval, IntervalEstimate};
use crate::linalg::CovarianceMatrix;
use crate::posterior::PosteriorSampleSet;
use crate::sampling::DataMatrix;

/// Square-root transform `sqrt(N + 1/4)` of a count matrix, followed by
/// centering every column with the mean of its first `train_rows` rows.
pub fn transform_counts(raw: &DMatrix<f64>, train_rows: usize) -> Result<DataMatrix> {
    if train_rows == 0 || train_rows > raw.nrows() {
        return Err(Error::invalid(format!(
            "train_rows must lie in 1..={}, got {train_rows}",
            raw.nrows()
        )));
    }
    if let Some(bad) = raw.iter().find(|v| !(v.is_finite() && **v >= 0.0 && v.fract() == 0.0)) {
        return Err(Error::InvalidData(format!("counts must be nonnegative integers, found {bad}")));
    }
    center_with_leading_rows(raw.map(|n| (n + 0.25).sqrt()), train_rows)
}

/// Subtracts from every column the mean of its first `train_rows` entries.
pub fn center_with_leading_rows(mut x: DMatrix<f64>, train_rows: usize) -> Result<DataMatrix> {
    if train_rows == 0 || train_rows > x.nrows() {
        return Err(Error::invalid(format!(
            "train_rows must lie in 1..={}, got {train_rows}",
            x.nrows()
        )));
    }
    for mut col in x.column_iter_mut() {
        let mean = col.rows(0, train_rows).mean();
        col.add_scalar_mut(-mean);
    }
    DataMatrix::new(x)
}

/// Leading `split` coordinates are observed; the rest are predicted.
#[derive(Clone, Debug)]
pub struct PredictionTask {
    split: usize,
    train: DataMatrix,
    test: DataMatrix,
}

impl PredictionTask {
    /// The first `train_rows` rows of `data` train, the remainder test.
    pub fn new(data: &DataMatrix, split: usize, train_rows: usize) -> Result<Self> {
        let p = data.p();
        if split == 0 || split >= p {
            return Err(Error::invalid(format!("split must satisfy 1 <= split < p = {p}, got {split}")));
        }
        if train_rows == 0 || train_rows >= data.n() {
            return Err(Error::invalid(format!(
                "need at least one training and one test row, got train_rows={train_rows} of {}",
                data.n()
            )));
        }
        Ok(Self {
            split,
            train: data.slice_rows(0, train_rows)?,
            test: data.slice_rows(train_rows, data.n())?,
        })
    }

    pub fn split(&self) -> usize {
        self.split
    }

    pub fn train(&self) -> &DataMatrix {
        &self.train
    }

    pub fn test(&self) -> &DataMatrix {
        &self.test
    }

    /// Observed head and held-out tail of every test row.
    pub fn test_pairs(&self) -> Vec<(DVector<f64>, DVector<f64>)> {
        let p = self.test.p();
        (0..self.test.n())
            .map(|i| {
                let row = self.test.row(i);
                (row.rows(0, self.split).into_owned(), row.rows(self.split, p - self.split).into_owned())
            })
            .collect()
    }
}

/// Gaussian conditional mean of the trailing `p - split` coordinates given
/// the leading `split` ones.
pub fn predict_tail(sigma: &CovarianceMatrix, split: usize, x_obs: &DVector<f64>) -> Result<DVector<f64>> {
    let p = sigma.dim();
    if split == 0 || split >= p {
        return Err(Error::invalid(format!("split must satisfy 1 <= split < p = {p}, got {split}")));
    }
    if x_obs.len() != split {
        return Err(Error::DimensionMismatch {
            expected: split,
            found: x_obs.len(),
        });
    }
    let m = sigma.as_matrix();
    let head = m.view((0, 0), (split, split)).into_owned();
    let chol = head
        .cholesky()
        .ok_or_else(|| Error::numeric("observed block is not positive definite"))?;
    let weights = chol.solve(x_obs);
    Ok(m.view((split, 0), (p - split, split)) * weights)
}

/// Per-coordinate equal-tailed intervals of the tail prediction across draws.
pub fn predict_tail_intervals(
    s: &PosteriorSampleSet,
    split: usize,
    x_obs: &DVector<f64>,
    level: f64,
) -> Result<Vec<IntervalEstimate>> {
    let preds = s
        .draws()
        .par_iter()
        .map(|d| predict_tail(d, split, x_obs))
        .collect::<Result<Vec<_>>>()?;
    (0..s.dim() - split)
        .map(|j| {
            let values: Vec<f64> = preds.iter().map(|v| v[j]).collect();
            quantile_credible_interval(&values, level)
        })
        .collect()
}

/// `(1/T) sum_t ||observed_t - predicted_t||^2` over `T` test rows.
pub fn prediction_mse(predicted: &[DVector<f64>], observed: &[DVector<f64>]) -> Result<f64> {
    if predicted.len() != observed.len() {
        return Err(Error::DimensionMismatch {
            expected: observed.len(),
            found: predicted.len(),
        });
    }
    if observed.is_empty() {
        return Err(Error::invalid("no rows to score"));
    }
    let mut total = 0.0;
    for (a, b) in predicted.iter().zip(observed) {
        if a.len() != b.len() {
            return Err(Error::DimensionMismatch {
                expected: b.len(),
                found: a.len(),
            });
        }
        total += (a - b).norm_squared();
    }
    Ok(total / observed.len() as f64)
}

/// Predicts every test row of `task` with `sigma` and scores the result.
pub fn evaluate_task(sigma: &CovarianceMatrix, task: &PredictionTask) -> Result<(Vec<DVector<f64>>, f64)> {
    let pairs = task.test_pairs();
    let predicted = pairs
        .iter()
        .map(|(head, _)| predict_tail(sigma, task.split, head))
        .collect::<Result<Vec<_>>>()?;
    let observed: Vec<DVector<f64>> = pairs.into_iter().map(|(_, tail)| tail).collect();
    let mse = prediction_mse(&predicted, &observed)?;
    Ok((predicted, mse))
}
