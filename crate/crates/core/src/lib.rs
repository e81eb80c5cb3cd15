//! Bayesian estimation of banded covariance matrices by post-processing
//! draws from a conjugate inverse-Wishart posterior.
//!
//! The workflow is: update an inverse-Wishart prior with data
//! ([`conjugate_update`]), draw from the resulting posterior
//! ([`draw_initial_samples`]), then map every draw onto banded positive
//! definite matrices, either by banding plus an eigenvalue floor
//! ([`banding_post_process`]) or by the dual banded fit
//! ([`dual_post_process`]). The floor and the bandwidth can be tuned by
//! importance-weighted leave-one-out cross-validation ([`selection`]).
//!
//! Frequentist baselines live in [`frequentist`], interval estimates for
//! scalar functionals in [`inference`], and the simulation harness in
//! [`harness`].

pub mod error;
pub mod frequentist;
pub mod harness;
pub mod inference;
pub mod io;
pub mod linalg;
pub mod posterior;
pub mod prediction;
pub mod sampling;
pub mod selection;

pub use error::{Error, Result};
pub use linalg::{band, pd_band_adjust, spectral_norm, BandSpec, CovarianceMatrix};
pub use posterior::{
    banding_post_process, conjugate_update, draw_initial_samples, dual_post_process, posterior_mean,
    PostProcessing, PosteriorSampleSet, Provenance,
};
pub use sampling::{DataMatrix, IwParams, SeedSpec};
