//! Prediction for untested compounds: the GP posterior of `u*`, class
//! probabilities mixed over it, and the variance correction for the
//! estimated parameters.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chemspace::Fingerprint;
use crate::error::{Error, Result};
use crate::fit::FittedModel;
use crate::kernel::{covariance_dlogphi, cross_covariance, cross_covariance_dlogphi};
use crate::laplace::{mode_sensitivity, Dataset, LaplaceState};
use crate::link::Link;
use crate::params::ModelParams;

pub const GH_POINTS: usize = 21;

/// Gauss–Hermite nodes and weights for `∫ e^{-z²} f(z) dz` by the
/// Golub–Welsch method, with the weights divided by `√π` so they sum to one.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let jacobi = DMatrix::from_fn(n, n, |i, j| {
        if i + 1 == j || j + 1 == i {
            (i.max(j) as f64 / 2.0).sqrt()
        } else {
            0.0
        }
    });
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|k| (eig.eigenvalues[k], eig.eigenvectors[(0, k)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Symmetrize: the rule is exact for odd functions.
    for k in 0..n / 2 {
        let z = 0.5 * (pairs[n - 1 - k].0 - pairs[k].0);
        let w = 0.5 * (pairs[n - 1 - k].1 + pairs[k].1);
        pairs[k] = (-z, w);
        pairs[n - 1 - k] = (z, w);
    }
    if n % 2 == 1 {
        pairs[n / 2].0 = 0.0;
    }
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    pairs.into_iter().map(|(z, w)| (z, w / total)).unzip()
}

fn gh21() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| gauss_hermite(GH_POINTS))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Quadrature,
    ProbitClosedForm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub mean_u: f64,
    pub var_u: f64,
    /// `None` when the information matrix could not be inverted.
    pub var_u_corrected: Option<f64>,
    pub class_probs: Vec<f64>,
    pub method: Method,
}

/// Read-only view of the pieces needed to predict: parameters, training
/// data and the Laplace state at those parameters.
#[derive(Clone, Copy)]
pub struct Posterior<'a> {
    pub params: &'a ModelParams,
    pub data: &'a Dataset,
    pub state: &'a LaplaceState,
}

/// Cross-covariance of a candidate with the training compounds. A candidate
/// already in the space takes its column of `K` (jitter included), so that
/// `K⁻¹K_*` is exactly a unit vector.
struct Cross {
    k_star: DVector<f64>,
    k_ss: f64,
    position: Option<usize>,
    distances: Vec<f64>,
}

impl<'a> Posterior<'a> {
    pub fn new(params: &'a ModelParams, data: &'a Dataset, state: &'a LaplaceState) -> Self {
        Posterior { params, data, state }
    }

    fn cross(&self, candidate: &Fingerprint) -> Result<Cross> {
        let space = self.data.space();
        let distances = space.distances_to(candidate)?;
        match space.position(candidate) {
            Some(r) => {
                let k = self.state.covariance().matrix();
                Ok(Cross {
                    k_star: k.column(r).into_owned(),
                    k_ss: k[(r, r)],
                    position: Some(r),
                    distances,
                })
            }
            None => {
                let (k_star, k_ss) = cross_covariance(&self.params.kernel, space, candidate)?;
                Ok(Cross {
                    k_star,
                    k_ss,
                    position: None,
                    distances,
                })
            }
        }
    }

    fn posterior_from(&self, cross: &Cross) -> (f64, f64) {
        let cov = self.state.covariance();
        let a = cov.solve_lower(&cross.k_star);
        let w = cov.solve_lower(&self.state.u_hat);
        let mean = a.dot(&w);
        let var = cross.k_ss - a.dot(&a) + self.state.whitened_quad(&a);
        (mean, var.max(0.0))
    }

    /// `E[u*|y] ≈ K_*ᵀK⁻¹û` and
    /// `Var[u*|y] ≈ K_** - K_*ᵀK⁻¹K_* + K_*ᵀK⁻¹Ĥ⁻¹K⁻¹K_*`.
    pub fn posterior_u(&self, candidate: &Fingerprint) -> Result<(f64, f64)> {
        Ok(self.posterior_from(&self.cross(candidate)?))
    }

    /// `∂û*/∂v` in the unconstrained coordinates `v`, by implicit
    /// differentiation of the score equation.
    pub fn u_star_gradient(&self, candidate: &Fingerprint) -> Result<DVector<f64>> {
        let cross = self.cross(candidate)?;
        self.gradient_from(&cross)
    }

    fn gradient_from(&self, cross: &Cross) -> Result<DVector<f64>> {
        let layout = self.params.layout();
        let du = mode_sensitivity(self.params, self.data, self.state, &layout)?;
        let cov = self.state.covariance();
        let k_inv_k_star = cov.solve(&cross.k_star);
        let mut g = du.tr_mul(&k_inv_k_star);
        // For log σ² the direct terms cancel: ∂K_* = K_* and ∂K = K.
        if let Some(pi) = layout.phi_index() {
            let dk_star = match cross.position {
                Some(r) => covariance_dlogphi(&self.params.kernel, self.data.space())
                    .expect("family has phi")
                    .column(r)
                    .into_owned(),
                None => cross_covariance_dlogphi(&self.params.kernel, &cross.distances),
            };
            let dk = covariance_dlogphi(&self.params.kernel, self.data.space()).expect("family has phi");
            let kiu = &self.state.k_inv_u;
            g[pi] += dk_star.dot(kiu) - k_inv_k_star.dot(&(dk * kiu));
        }
        Ok(g)
    }

    /// Class probabilities at covariates `x_star`, mixing over
    /// `u* ~ N(mean, var)` with 21-point Gauss–Hermite quadrature.
    pub fn class_probabilities(&self, candidate: &Fingerprint, x_star: &[f64]) -> Result<Vec<f64>> {
        self.check_x(x_star)?;
        let (mean, var) = self.posterior_u(candidate)?;
        Ok(mixture_probabilities(
            self.params,
            self.params.linear_predictor(x_star),
            mean,
            var,
        ))
    }

    fn check_x(&self, x_star: &[f64]) -> Result<()> {
        if x_star.len() != self.params.beta.len() {
            return Err(Error::Config(format!(
                "model has {} covariates, got {}",
                self.params.beta.len(),
                x_star.len()
            )));
        }
        Ok(())
    }
}

/// `π_j(u) = G(α_j + xβ + u) - G(α_{j-1} + xβ + u)` for every class.
pub fn plain_probabilities(params: &ModelParams, xbeta: f64, u: f64) -> Vec<f64> {
    let c = params.n_classes();
    let link = params.link;
    (0..c)
        .map(|j| {
            let lo = if j == 0 { f64::NEG_INFINITY } else { params.alphas[j - 1] + xbeta + u };
            let hi = if j + 1 == c { f64::INFINITY } else { params.alphas[j] + xbeta + u };
            link.interval(lo, hi)
        })
        .collect()
}

/// Gauss–Hermite mixture of class probabilities over `u ~ N(mean, var)`.
pub fn mixture_probabilities(params: &ModelParams, xbeta: f64, mean: f64, var: f64) -> Vec<f64> {
    let (z, w) = gh21();
    mixture_with_rule(params, xbeta, mean, var, z, w)
}

/// As [`mixture_probabilities`] with an arbitrary normalized rule.
pub fn mixture_with_rule(
    params: &ModelParams,
    xbeta: f64,
    mean: f64,
    var: f64,
    nodes: &[f64],
    weights: &[f64],
) -> Vec<f64> {
    let c = params.n_classes();
    let sd = var.max(0.0).sqrt();
    let mut out = vec![0.0; c];
    for (&z, &w) in nodes.iter().zip(weights) {
        let u = mean + std::f64::consts::SQRT_2 * sd * z;
        for (o, p) in out.iter_mut().zip(plain_probabilities(params, xbeta, u)) {
            *o += w * p;
        }
    }
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= total);
    out
}

/// `Φ((μ + α_j + xβ)/√(1+σ²)) - Φ((μ + α_{j-1} + xβ)/√(1+σ²))`, with
/// `±∞` intercepts for the boundary classes.
pub fn probit_closed_form(alpha_j: f64, alpha_jm1: f64, xbeta: f64, mu_star: f64, var_star: f64) -> f64 {
    let s = (1.0 + var_star).sqrt();
    Link::Probit.interval((mu_star + alpha_jm1 + xbeta) / s, (mu_star + alpha_j + xbeta) / s)
}

/// Closed-form class probabilities for a probit model.
pub fn probit_class_probabilities(params: &ModelParams, xbeta: f64, mean: f64, var: f64) -> Result<Vec<f64>> {
    if params.link != Link::Probit {
        return Err(Error::WrongLink(params.link.to_string()));
    }
    let c = params.n_classes();
    Ok((0..c)
        .map(|j| {
            let lo = if j == 0 { f64::NEG_INFINITY } else { params.alphas[j - 1] };
            let hi = if j + 1 == c { f64::INFINITY } else { params.alphas[j] };
            probit_closed_form(hi, lo, xbeta, mean, var)
        })
        .collect())
}

pub fn posterior_u(model: &FittedModel, candidate: &Fingerprint) -> Result<(f64, f64)> {
    model.posterior().posterior_u(candidate)
}

pub fn class_probabilities(model: &FittedModel, candidate: &Fingerprint, x_star: &[f64]) -> Result<Vec<f64>> {
    model.posterior().class_probabilities(candidate, x_star)
}

/// Corrected variance `∇û*ᵀ 𝒥⁻¹ ∇û* + Var[u*|y]`. Returns the uncorrected
/// variance and `false` when the information matrix is singular.
pub fn corrected_variance(model: &FittedModel, candidate: &Fingerprint) -> Result<(f64, bool)> {
    let post = model.posterior();
    let cross = post.cross(candidate)?;
    let (_, var) = post.posterior_from(&cross);
    match &model.info_inverse {
        Some(inv) => {
            let g = post.gradient_from(&cross)?;
            Ok((var + (g.transpose() * inv * &g)[0].max(0.0), true))
        }
        None => Ok((var, false)),
    }
}

/// Full prediction for one candidate.
pub fn predict(model: &FittedModel, candidate: &Fingerprint, x_star: &[f64]) -> Result<Prediction> {
    let post = model.posterior();
    post.check_x(x_star)?;
    let cross = post.cross(candidate)?;
    let (mean, var) = post.posterior_from(&cross);
    let var_corrected = match &model.info_inverse {
        Some(inv) => {
            let g = post.gradient_from(&cross)?;
            Some(var + (g.transpose() * inv * &g)[0].max(0.0))
        }
        None => None,
    };
    let xbeta = model.params.linear_predictor(x_star);
    Ok(Prediction {
        mean_u: mean,
        var_u: var,
        var_u_corrected: var_corrected,
        class_probs: mixture_probabilities(&model.params, xbeta, mean, var),
        method: Method::Quadrature,
    })
}

/// Predictions for many candidates sharing the model's factorizations.
pub fn predict_batch(
    model: &FittedModel,
    candidates: &[Fingerprint],
    x_star: &[f64],
) -> Result<Vec<Prediction>> {
    candidates
        .par_iter()
        .map(|c| predict(model, c, x_star))
        .collect()
}
