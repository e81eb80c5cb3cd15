//! Plain-text persistence: headerless CSV matrices, data files, posterior
//! sample directories and fit manifests.

use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::CovarianceMatrix;
use crate::posterior::{PosteriorSampleSet, Provenance};
use crate::sampling::DataMatrix;

const SAMPLE_MANIFEST: &str = "manifest.json";

/// Reads a headerless numeric CSV into a dense matrix.
pub fn read_csv_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let row = record
            .iter()
            .map(|field| {
                field
                    .parse::<f64>()
                    .map_err(|_| Error::InvalidData(format!("row {}: cannot parse '{field}' as a number", line + 1)))
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::InvalidData(format!(
                    "row {} has {} columns, expected {}",
                    line + 1,
                    row.len(),
                    first.len()
                )));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::InvalidData(format!("{} holds no rows", path.display())));
    }
    let cols = rows[0].len();
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

/// Writes `m` with 17 significant digits so that reading it back is exact.
pub fn write_csv_matrix(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut writer = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for i in 0..m.nrows() {
        writer.write_record(m.row(i).iter().map(|v| format!("{v:.16e}")))?;
    }
    writer.flush()?;
    Ok(())
}

/// Stacks equal-length vectors as the rows of a matrix.
pub fn rows_to_matrix(rows: &[DVector<f64>], width: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), width, |i, j| rows[i][j])
}

pub fn read_covariance(path: &Path) -> Result<CovarianceMatrix> {
    CovarianceMatrix::new(read_csv_matrix(path)?)
}

pub fn write_covariance(path: &Path, m: &CovarianceMatrix) -> Result<()> {
    write_csv_matrix(path, m.as_matrix())
}

/// Rows are observations, columns are coordinates.
pub fn read_data(path: &Path) -> Result<DataMatrix> {
    DataMatrix::new(read_csv_matrix(path)?)
}

pub fn write_data(path: &Path, data: &DataMatrix) -> Result<()> {
    write_csv_matrix(path, data.as_matrix())
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleManifest {
    provenance: Provenance,
    count: usize,
    dim: usize,
    files: Vec<String>,
}

/// Saves one CSV per draw plus a JSON manifest recording provenance.
pub fn save_sample_set(dir: &Path, s: &PosteriorSampleSet) -> Result<()> {
    fs::create_dir_all(dir)?;
    let width = s.len().to_string().len();
    let files: Vec<String> = (0..s.len()).map(|i| format!("draw_{i:0width$}.csv")).collect();
    for (name, draw) in files.iter().zip(s.draws()) {
        write_covariance(&dir.join(name), draw)?;
    }
    let manifest = SampleManifest {
        provenance: s.provenance().clone(),
        count: s.len(),
        dim: s.dim(),
        files,
    };
    fs::write(dir.join(SAMPLE_MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_sample_set(dir: &Path) -> Result<PosteriorSampleSet> {
    let manifest: SampleManifest = serde_json::from_str(&fs::read_to_string(dir.join(SAMPLE_MANIFEST))?)?;
    if manifest.files.len() != manifest.count {
        return Err(Error::InvalidData("manifest count does not match its file list".into()));
    }
    let draws = manifest
        .files
        .iter()
        .map(|f| read_covariance(&dir.join(f)))
        .collect::<Result<Vec<_>>>()?;
    if draws.iter().any(|d| d.dim() != manifest.dim) {
        return Err(Error::InvalidData("draw dimension does not match the manifest".into()));
    }
    PosteriorSampleSet::new(draws, manifest.provenance)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorSummary {
    pub scale: String,
    pub nu: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timestamps {
    /// Seconds since the Unix epoch.
    pub started: f64,
    pub finished: f64,
}

/// Metadata written next to every fitted estimate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitManifest {
    pub method: String,
    pub bandwidth: Option<usize>,
    pub eps: Option<f64>,
    pub seed: u64,
    pub n: usize,
    pub p: usize,
    pub prior: PriorSummary,
    pub timestamps: Timestamps,
}

pub fn unix_seconds() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}
