//! Correlation functions on the chemical space and the GP covariance matrix.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::chemspace::{ChemicalSpace, Fingerprint};
use crate::error::{Error, Result};

/// Diagonal jitter relative to `sigma2`, and the single retry value.
pub const JITTER: f64 = 1e-8;
pub const JITTER_RETRY: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    /// The raw Tanimoto similarity `S = 1 - T`.
    Tanimoto,
    /// `exp(-√t / φ)`.
    Exponential,
    /// `exp(-t / φ²)`.
    Gaussian,
    /// Uncorrelated compound effects.
    Independent,
}

impl KernelFamily {
    pub const ALL: [KernelFamily; 4] = [
        KernelFamily::Tanimoto,
        KernelFamily::Exponential,
        KernelFamily::Gaussian,
        KernelFamily::Independent,
    ];

    pub fn uses_phi(self) -> bool {
        matches!(self, KernelFamily::Exponential | KernelFamily::Gaussian)
    }

    pub fn name(self) -> &'static str {
        match self {
            KernelFamily::Tanimoto => "tanimoto",
            KernelFamily::Exponential => "exponential",
            KernelFamily::Gaussian => "gaussian",
            KernelFamily::Independent => "independent",
        }
    }
}

impl fmt::Display for KernelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for KernelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        KernelFamily::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown kernel family {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub sigma2: f64,
    #[serde(default = "default_phi")]
    pub phi: f64,
}

fn default_phi() -> f64 {
    1.0
}

impl KernelSpec {
    pub fn new(family: KernelFamily, sigma2: f64, phi: f64) -> Result<Self> {
        let spec = KernelSpec {
            family,
            sigma2,
            phi,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// `sigma2 = 0` is accepted (a degenerate, effect-free model used by the
    /// simulator) but cannot be factorized.
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma2.is_finite() && self.sigma2 >= 0.0) {
            return Err(Error::Config(format!("sigma2 must be >= 0, got {}", self.sigma2)));
        }
        if self.family.uses_phi() && !(self.phi.is_finite() && self.phi > 0.0) {
            return Err(Error::Config(format!("phi must be > 0, got {}", self.phi)));
        }
        Ok(())
    }

    /// Correlation at Tanimoto distance `t`.
    pub fn correlation(&self, t: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(format!("Tanimoto distance {t} outside [0, 1]")));
        }
        Ok(self.correlation_unchecked(t))
    }

    fn correlation_unchecked(&self, t: f64) -> f64 {
        match self.family {
            KernelFamily::Tanimoto => 1.0 - t,
            KernelFamily::Exponential => (-t.sqrt() / self.phi).exp(),
            KernelFamily::Gaussian => (-t / (self.phi * self.phi)).exp(),
            KernelFamily::Independent => {
                if t == 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// `∂R(t, φ) / ∂ log φ`; zero for families without a scale.
    pub fn correlation_dlogphi(&self, t: f64) -> f64 {
        match self.family {
            KernelFamily::Exponential => {
                let s = t.sqrt();
                (-s / self.phi).exp() * s / self.phi
            }
            KernelFamily::Gaussian => {
                let p2 = self.phi * self.phi;
                (-t / p2).exp() * 2.0 * t / p2
            }
            KernelFamily::Tanimoto | KernelFamily::Independent => 0.0,
        }
    }
}

pub fn correlation(spec: &KernelSpec, t: f64) -> Result<f64> {
    spec.correlation(t)
}

/// The covariance matrix `K` of the compound effects, with its Cholesky factor.
#[derive(Clone, Debug)]
pub struct Covariance {
    matrix: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    jitter: f64,
    log_det: f64,
}

impl Covariance {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// Lower-triangular factor `L` with `K = L Lᵀ`.
    pub fn l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn cholesky(&self) -> &Cholesky<f64, Dyn> {
        &self.chol
    }

    /// Jitter actually added to the diagonal, as a multiple of `sigma2`.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// `K⁻¹ b`.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    /// `L⁻¹ b`.
    pub fn solve_lower(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol
            .l_dirty()
            .solve_lower_triangular(b)
            .expect("Cholesky factor has a positive diagonal")
    }

    /// `L⁻ᵀ b`.
    pub fn solve_upper(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol
            .l_dirty()
            .tr_solve_lower_triangular(b)
            .expect("Cholesky factor has a positive diagonal")
    }

    /// `L b`.
    pub fn mul_lower(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.l() * b
    }
}

/// Unjittered `σ² R(T_rs, φ)`.
pub fn correlation_matrix(spec: &KernelSpec, space: &ChemicalSpace) -> DMatrix<f64> {
    space
        .distance()
        .map(|t| spec.sigma2 * spec.correlation_unchecked(t))
}

pub fn covariance_matrix(spec: &KernelSpec, space: &ChemicalSpace) -> Result<Covariance> {
    spec.validate()?;
    let indefinite = || Error::KernelIndefinite {
        family: spec.family.to_string(),
        phi: spec.phi,
    };
    if spec.sigma2 <= 0.0 {
        return Err(indefinite());
    }
    let base = correlation_matrix(spec, space);
    for jitter in [JITTER, JITTER_RETRY] {
        let mut k = base.clone();
        for i in 0..k.nrows() {
            k[(i, i)] += jitter * spec.sigma2;
        }
        if let Some(chol) = Cholesky::new(k.clone()) {
            let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
            if jitter > JITTER {
                log::warn!(
                    "covariance for {} kernel (phi {}) needed jitter {jitter:e}",
                    spec.family,
                    spec.phi
                );
            }
            return Ok(Covariance {
                matrix: k,
                chol,
                jitter,
                log_det,
            });
        }
    }
    Err(indefinite())
}

/// `∂K / ∂ log φ`, or `None` when the family has no scale parameter.
pub fn covariance_dlogphi(spec: &KernelSpec, space: &ChemicalSpace) -> Option<DMatrix<f64>> {
    spec.family
        .uses_phi()
        .then(|| space.distance().map(|t| spec.sigma2 * spec.correlation_dlogphi(t)))
}

/// Covariance between the compound effects and a candidate: `K_*` and `K_**`.
pub fn cross_covariance(
    spec: &KernelSpec,
    space: &ChemicalSpace,
    candidate: &Fingerprint,
) -> Result<(DVector<f64>, f64)> {
    let t = space.distances_to(candidate)?;
    let k_star = DVector::from_iterator(
        t.len(),
        t.iter().map(|&t| spec.sigma2 * spec.correlation_unchecked(t)),
    );
    Ok((k_star, spec.sigma2))
}

/// `∂K_* / ∂ log φ` for a candidate at distances `t`.
pub fn cross_covariance_dlogphi(spec: &KernelSpec, t: &[f64]) -> DVector<f64> {
    DVector::from_iterator(
        t.len(),
        t.iter().map(|&t| spec.sigma2 * spec.correlation_dlogphi(t)),
    )
}
