//! Generators for the banded true covariance matrices used in the simulations.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{band_matrix, extreme_eigenvalues, symmetrize, CovarianceMatrix};
use crate::sampling::SeedSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrueCovKind {
    /// Banded polynomial decay `rho |i-j|^{-(alpha+1)}`.
    Sigma1,
    /// Triangular taper `max(1 - |i-j|/(k0+1), 0)`.
    Sigma2,
    /// Random `L D L^T` with banded unit-lower `L` and inverse-gamma `D`.
    Sigma3,
}

impl TrueCovKind {
    pub fn label(&self) -> &'static str {
        match self {
            TrueCovKind::Sigma1 => "sigma1",
            TrueCovKind::Sigma2 => "sigma2",
            TrueCovKind::Sigma3 => "sigma3",
        }
    }
}

fn default_rho() -> f64 {
    0.6
}

fn default_alpha() -> f64 {
    0.1
}

fn default_floor() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrueCovSpec {
    pub kind: TrueCovKind,
    pub p: usize,
    pub k0: usize,
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default = "default_alpha")]
    pub alpha_decay: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_floor")]
    pub lambda_floor: f64,
}

impl TrueCovSpec {
    pub fn new(kind: TrueCovKind, p: usize, k0: usize) -> Self {
        Self {
            kind,
            p,
            k0,
            rho: default_rho(),
            alpha_decay: default_alpha(),
            seed: 0,
            lambda_floor: default_floor(),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.p == 0 || self.k0 > self.p - 1 {
            return Err(Error::invalid(format!("need 0 <= k0 <= p - 1, got k0={}, p={}", self.k0, self.p)));
        }
        if !(self.rho > -1.0 && self.rho < 1.0) {
            return Err(Error::invalid(format!("rho must lie in (-1, 1), got {}", self.rho)));
        }
        if !(self.lambda_floor > 0.0) {
            return Err(Error::invalid("lambda_floor must be positive"));
        }
        Ok(())
    }
}

/// Builds the truth described by `spec`.
pub fn make_truth(spec: &TrueCovSpec) -> Result<CovarianceMatrix> {
    match spec.kind {
        TrueCovKind::Sigma1 => make_sigma1(spec),
        TrueCovKind::Sigma2 => make_sigma2(spec),
        TrueCovKind::Sigma3 => make_sigma3(spec),
    }
}

fn expect_kind(spec: &TrueCovSpec, kind: TrueCovKind) -> Result<()> {
    spec.validate()?;
    if spec.kind != kind {
        return Err(Error::invalid(format!("expected a {} spec, got {}", kind.label(), spec.kind.label())));
    }
    Ok(())
}

/// `m + (floor - lambda_min(m)) I`.
fn shift_to(m: DMatrix<f64>, floor: f64) -> Result<CovarianceMatrix> {
    let c = CovarianceMatrix::new(symmetrize(m))?;
    let (lo, _) = extreme_eigenvalues(&c)?;
    let mut out = c.into_matrix();
    for i in 0..out.nrows() {
        out[(i, i)] += floor - lo;
    }
    CovarianceMatrix::new(out)
}

pub fn make_sigma1(spec: &TrueCovSpec) -> Result<CovarianceMatrix> {
    expect_kind(spec, TrueCovKind::Sigma1)?;
    let p = spec.p;
    let raw = DMatrix::from_fn(p, p, |i, j| {
        if i == j {
            1.0
        } else {
            spec.rho * (i.abs_diff(j) as f64).powf(-(spec.alpha_decay + 1.0))
        }
    });
    shift_to(band_matrix(&raw, spec.k0), spec.lambda_floor)
}

pub fn make_sigma2(spec: &TrueCovSpec) -> Result<CovarianceMatrix> {
    expect_kind(spec, TrueCovKind::Sigma2)?;
    let p = spec.p;
    let width = spec.k0 as f64 + 1.0;
    let raw = DMatrix::from_fn(p, p, |i, j| (1.0 - i.abs_diff(j) as f64 / width).max(0.0));
    shift_to(raw, spec.lambda_floor)
}

pub fn make_sigma3(spec: &TrueCovSpec) -> Result<CovarianceMatrix> {
    expect_kind(spec, TrueCovKind::Sigma3)?;
    let p = spec.p;
    let mut rng = SeedSpec::new(spec.seed).child(3).rng();
    let mut l = DMatrix::<f64>::identity(p, p);
    for i in 0..p {
        for j in i.saturating_sub(spec.k0)..i {
            l[(i, j)] = rng.sample(StandardNormal);
        }
    }
    // IG(5, 1): reciprocal of Gamma(shape 5, scale 1)
    let gamma = Gamma::new(5.0, 1.0).expect("valid gamma parameters");
    let d: Vec<f64> = (0..p).map(|_| 1.0 / gamma.sample(&mut rng)).collect();
    let mut ld = l.clone();
    for (j, dj) in d.iter().enumerate() {
        ld.column_mut(j).scale_mut(*dj);
    }
    let raw = band_matrix(&(ld * l.transpose()), spec.k0);
    shift_to(raw, spec.lambda_floor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{is_banded, BandSpec};
    use approx::assert_relative_eq;

    #[test]
    fn sigma1_entries_and_floor() {
        let spec = TrueCovSpec::new(TrueCovKind::Sigma1, 30, 5);
        let s = make_sigma1(&spec).unwrap();
        let (lo, _) = extreme_eigenvalues(&s).unwrap();
        assert_relative_eq!(lo, 0.5, epsilon = 1e-10);
        // off-diagonals are untouched by the diagonal shift
        assert_relative_eq!(s.get(0, 1), 0.6, epsilon = 1e-15);
        assert_eq!(s.get(0, 6), 0.0);
        assert!(is_banded(&s, BandSpec::new(5, 30).unwrap()));
    }

    #[test]
    fn sigma2_taper() {
        let spec = TrueCovSpec::new(TrueCovKind::Sigma2, 20, 3);
        let s = make_sigma2(&spec).unwrap();
        let shift = s.get(0, 0) - 1.0;
        assert_relative_eq!(s.get(0, 1), 0.75, epsilon = 1e-15);
        assert_eq!(s.get(0, 4), 0.0);
        let (lo, _) = extreme_eigenvalues(&s).unwrap();
        assert_relative_eq!(lo, 0.5, epsilon = 1e-10);
        assert_relative_eq!(s.get(5, 5), 1.0 + shift, epsilon = 1e-15);
    }

    #[test]
    fn sigma3_deterministic_and_banded() {
        let spec = TrueCovSpec::new(TrueCovKind::Sigma3, 25, 4).with_seed(7);
        let a = make_sigma3(&spec).unwrap();
        let b = make_sigma3(&spec).unwrap();
        assert_eq!(a, b);
        assert!(is_banded(&a, BandSpec::new(4, 25).unwrap()));
        // bandwidth is exactly k0
        assert!((0..21).any(|i| a.get(i, i + 4) != 0.0));
        let (lo, _) = extreme_eigenvalues(&a).unwrap();
        assert_relative_eq!(lo, 0.5, epsilon = 1e-10);
        let c = make_sigma3(&spec.clone().with_seed(8)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn kind_mismatch_and_validation() {
        let spec = TrueCovSpec::new(TrueCovKind::Sigma2, 10, 2);
        assert!(make_sigma1(&spec).is_err());
        assert!(make_truth(&TrueCovSpec::new(TrueCovKind::Sigma1, 5, 5)).is_err());
        let mut bad = TrueCovSpec::new(TrueCovKind::Sigma1, 5, 1);
        bad.rho = 1.0;
        assert!(make_truth(&bad).is_err());
    }
}
