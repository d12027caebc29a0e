//! Ordinal Gaussian-process regression over Tanimoto chemical space.
//!
//! Compounds are binary fingerprints; each carries a latent effect drawn from
//! a Gaussian process whose covariance is a function of Tanimoto distance.
//! Observations are ordered classes linked to covariates and the latent
//! effect through a cumulative link model. The marginal likelihood is
//! approximated by Laplace's method, maximized over the parameters, and the
//! fitted model drives prediction, cross-validation and a genetic search for
//! new compounds.

pub mod chemspace;
pub mod discover;
pub mod fit;
pub mod io;
pub mod error;
pub mod evalcv;
pub mod kernel;
pub mod laplace;
pub mod link;
pub mod params;
pub mod predict;
pub mod simstudy;

pub use chemspace::{build_space, Bits, ChemicalSpace, Fingerprint};
pub use error::{Error, ErrorCategory, Result};
pub use kernel::{KernelFamily, KernelSpec};
pub use laplace::{Dataset, LaplaceState};
pub use link::Link;
pub use params::{ModelParams, ParamLayout};
pub use fit::{fit_mle, FitOptions, FittedModel};
