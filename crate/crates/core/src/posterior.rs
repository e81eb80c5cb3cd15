//! The post-processed posterior: conjugate inverse-Wishart update, draws from
//! the unconstrained initial posterior, and the two post-processing maps
//! (banding with an eigenvalue floor, and the dual banded fit).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frequentist::{dual_mle, DEFAULT_MAX_ITER};
use crate::linalg::{pd_band_adjust, BandSpec, CovarianceMatrix};
use crate::sampling::{DataMatrix, InverseWishartSampler, IwParams, SeedSpec};

/// Post-processing applied to a sample set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PostProcessing {
    None,
    Banding { k: usize, eps: f64 },
    Dual { k: usize },
}

/// Where a sample set came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// Parameters of the initial (conjugate) posterior the draws came from.
    pub posterior: IwParams,
    pub seed: SeedSpec,
    pub processing: PostProcessing,
}

/// Ordered posterior draws plus their provenance. Immutable once built.
#[derive(Clone, Debug)]
pub struct PosteriorSampleSet {
    draws: Vec<CovarianceMatrix>,
    provenance: Provenance,
}

impl PosteriorSampleSet {
    pub fn new(draws: Vec<CovarianceMatrix>, provenance: Provenance) -> Result<Self> {
        let p = provenance.posterior.dim();
        if draws.is_empty() {
            return Err(Error::invalid("sample set must contain at least one draw"));
        }
        if let Some(bad) = draws.iter().find(|d| d.dim() != p) {
            return Err(Error::DimensionMismatch {
                expected: p,
                found: bad.dim(),
            });
        }
        Ok(Self { draws, provenance })
    }

    pub fn draws(&self) -> &[CovarianceMatrix] {
        &self.draws
    }

    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.provenance.posterior.dim()
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn processing(&self) -> PostProcessing {
        self.provenance.processing
    }

    /// The first `m` draws, same provenance.
    pub fn truncated(&self, m: usize) -> Result<Self> {
        if m == 0 || m > self.len() {
            return Err(Error::invalid(format!("cannot keep {m} of {} draws", self.len())));
        }
        Ok(Self {
            draws: self.draws[..m].to_vec(),
            provenance: self.provenance.clone(),
        })
    }

    fn require_unprocessed(&self) -> Result<()> {
        if self.provenance.processing != PostProcessing::None {
            return Err(Error::InvalidState(format!(
                "sample set is already post-processed ({:?})",
                self.provenance.processing
            )));
        }
        Ok(())
    }
}

/// `IW(B_0 + n S_n, nu_0 + n)` with the uncentered `S_n`.
pub fn conjugate_update(prior: &IwParams, data: &DataMatrix) -> Result<IwParams> {
    if prior.dim() != data.p() {
        return Err(Error::DimensionMismatch {
            expected: prior.dim(),
            found: data.p(),
        });
    }
    let scale = CovarianceMatrix::new(prior.scale().as_matrix() + data.scatter())?;
    IwParams::new(scale, prior.df() + data.n() as f64)
}

/// `count` independent draws from the initial posterior. Draw `s` uses
/// substream `seed.child(s)`, so the set does not depend on scheduling.
pub fn draw_initial_samples(post: &IwParams, count: usize, seed: SeedSpec) -> Result<PosteriorSampleSet> {
    if count == 0 {
        return Err(Error::invalid("need at least one posterior draw"));
    }
    let sampler = InverseWishartSampler::new(post.clone())?;
    let draws = (0..count)
        .into_par_iter()
        .map(|s| sampler.sample(seed.child(s as u64)))
        .collect::<Result<Vec<_>>>()?;
    PosteriorSampleSet::new(
        draws,
        Provenance {
            posterior: post.clone(),
            seed,
            processing: PostProcessing::None,
        },
    )
}

/// Applies the banding-plus-floor map to every draw.
pub fn banding_post_process(s: &PosteriorSampleSet, spec: BandSpec, eps: f64) -> Result<PosteriorSampleSet> {
    s.require_unprocessed()?;
    let draws = s
        .draws
        .par_iter()
        .map(|d| pd_band_adjust(d, spec, eps))
        .collect::<Result<Vec<_>>>()?;
    Ok(PosteriorSampleSet {
        draws,
        provenance: Provenance {
            processing: PostProcessing::Banding {
                k: spec.bandwidth(),
                eps,
            },
            ..s.provenance.clone()
        },
    })
}

/// Replaces every draw with the banded matrix whose inverse matches the
/// draw's inverse on the band. One failing draw fails the whole batch.
pub fn dual_post_process(s: &PosteriorSampleSet, spec: BandSpec, tol: f64) -> Result<PosteriorSampleSet> {
    s.require_unprocessed()?;
    let draws = s
        .draws
        .par_iter()
        .map(|d| dual_mle(d, spec, tol, DEFAULT_MAX_ITER))
        .collect::<Result<Vec<_>>>()?;
    Ok(PosteriorSampleSet {
        draws,
        provenance: Provenance {
            processing: PostProcessing::Dual { k: spec.bandwidth() },
            ..s.provenance.clone()
        },
    })
}

/// Entrywise average of the draws.
pub fn posterior_mean(s: &PosteriorSampleSet) -> Result<CovarianceMatrix> {
    CovarianceMatrix::mean(&s.draws)
}

/// Theoretical floor schedule `sqrt(log(max(k,2))^2 (k + log p) / n)`, used
/// when the floor is not tuned by cross-validation.
pub fn default_epsilon(k: usize, p: usize, n: usize) -> f64 {
    let lk = (k.max(2) as f64).ln();
    (lk * lk * (k as f64 + (p as f64).ln()) / n as f64).sqrt()
}
