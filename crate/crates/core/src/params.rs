//! Model parameters and their unconstrained parameterization.
//!
//! The optimizer works on `(α₁, log(α₂-α₁), …, log(α_{C-1}-α_{C-2}), β,
//! log σ², log φ)`; the `log φ` slot exists only for kernel families that
//! carry a scale.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{KernelFamily, KernelSpec};
use crate::link::Link;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub alphas: Vec<f64>,
    pub beta: Vec<f64>,
    pub kernel: KernelSpec,
    pub link: Link,
}

impl ModelParams {
    pub fn new(alphas: Vec<f64>, beta: Vec<f64>, kernel: KernelSpec, link: Link) -> Result<Self> {
        let params = ModelParams {
            alphas,
            beta,
            kernel,
            link,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn n_classes(&self) -> usize {
        self.alphas.len() + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.alphas.is_empty() {
            return Err(Error::Config("at least one intercept (two classes) required".into()));
        }
        if self.alphas.iter().chain(&self.beta).any(|v| !v.is_finite()) {
            return Err(Error::Config("intercepts and coefficients must be finite".into()));
        }
        check_increasing(&self.alphas)?;
        self.kernel.validate()
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout {
            n_classes: self.n_classes(),
            p: self.beta.len(),
            family: self.kernel.family,
            link: self.link,
        }
    }

    /// Natural-scale vector `(α, β, σ², [φ])` in layout order.
    pub fn natural_vector(&self) -> Vec<f64> {
        let mut out = self.alphas.clone();
        out.extend_from_slice(&self.beta);
        out.push(self.kernel.sigma2);
        if self.kernel.family.uses_phi() {
            out.push(self.kernel.phi);
        }
        out
    }

    /// `β⊤x` for one covariate row.
    pub fn linear_predictor(&self, x: &[f64]) -> f64 {
        self.beta.iter().zip(x).map(|(b, x)| b * x).sum()
    }
}

fn check_increasing(alphas: &[f64]) -> Result<()> {
    for w in alphas.windows(2) {
        if !(w[1] > w[0]) {
            return Err(Error::Ordering(format!(
                "intercepts must be strictly increasing, got {alphas:?}"
            )));
        }
    }
    Ok(())
}

/// Shape of the parameter vector for a given model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub n_classes: usize,
    pub p: usize,
    pub family: KernelFamily,
    pub link: Link,
}

impl ParamLayout {
    pub fn dim(&self) -> usize {
        self.n_classes - 1 + self.p + 1 + usize::from(self.family.uses_phi())
    }

    pub fn n_alpha(&self) -> usize {
        self.n_classes - 1
    }

    pub fn beta_offset(&self) -> usize {
        self.n_alpha()
    }

    pub fn sigma2_index(&self) -> usize {
        self.n_alpha() + self.p
    }

    pub fn phi_index(&self) -> Option<usize> {
        self.family.uses_phi().then(|| self.sigma2_index() + 1)
    }

    pub fn names(&self) -> Vec<String> {
        let mut out: Vec<String> = (1..=self.n_alpha()).map(|j| format!("alpha{j}")).collect();
        out.extend((1..=self.p).map(|k| format!("beta{k}")));
        out.push("sigma2".into());
        if self.family.uses_phi() {
            out.push("phi".into());
        }
        out
    }

    pub fn to_unconstrained(&self, params: &ModelParams) -> Result<DVector<f64>> {
        if params.n_classes() != self.n_classes || params.beta.len() != self.p {
            return Err(Error::Config("parameters do not match layout".into()));
        }
        check_increasing(&params.alphas)?;
        if !(params.kernel.sigma2 > 0.0) {
            return Err(Error::Domain("sigma2 must be positive to take its log".into()));
        }
        let mut out = Vec::with_capacity(self.dim());
        out.push(params.alphas[0]);
        out.extend(params.alphas.windows(2).map(|w| (w[1] - w[0]).ln()));
        out.extend_from_slice(&params.beta);
        out.push(params.kernel.sigma2.ln());
        if self.family.uses_phi() {
            out.push(params.kernel.phi.ln());
        }
        Ok(DVector::from_vec(out))
    }

    pub fn from_unconstrained(&self, v: &DVector<f64>) -> ModelParams {
        assert_eq!(v.len(), self.dim(), "unconstrained vector has wrong length");
        let mut alphas = Vec::with_capacity(self.n_alpha());
        let mut a = v[0];
        alphas.push(a);
        for k in 1..self.n_alpha() {
            a += v[k].exp();
            alphas.push(a);
        }
        let off = self.beta_offset();
        let beta = v.as_slice()[off..off + self.p].to_vec();
        let sigma2 = v[self.sigma2_index()].exp();
        let phi = self.phi_index().map_or(1.0, |i| v[i].exp());
        ModelParams {
            alphas,
            beta,
            kernel: KernelSpec {
                family: self.family,
                sigma2,
                phi,
            },
            link: self.link,
        }
    }

    /// `∂α_j / ∂v_k` for `j < C-1` and `k < C-1`.
    pub fn alpha_jacobian(&self, v: &DVector<f64>) -> DMatrix<f64> {
        let n = self.n_alpha();
        DMatrix::from_fn(n, n, |j, k| match k {
            0 => 1.0,
            k if k <= j => v[k].exp(),
            _ => 0.0,
        })
    }

    /// Jacobian of [`ModelParams::natural_vector`] with respect to the
    /// unconstrained vector.
    pub fn natural_jacobian(&self, v: &DVector<f64>) -> DMatrix<f64> {
        let d = self.dim();
        let mut jac = DMatrix::zeros(d, d);
        let na = self.n_alpha();
        jac.view_mut((0, 0), (na, na)).copy_from(&self.alpha_jacobian(v));
        for k in 0..self.p {
            jac[(na + k, na + k)] = 1.0;
        }
        let s = self.sigma2_index();
        jac[(s, s)] = v[s].exp();
        if let Some(i) = self.phi_index() {
            jac[(i, i)] = v[i].exp();
        }
        jac
    }
}
