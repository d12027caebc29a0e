//! Maximum-likelihood fitting of the model parameters.
//!
//! The Laplace log-likelihood is maximized over the unconstrained
//! parameterization by Nelder–Mead. The observed information is the negative
//! central-difference Hessian at the optimum, in the same coordinates.

use std::cell::RefCell;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use crate::params::ParamLayout;

use crate::error::{Error, Result};
use crate::kernel::{KernelFamily, KernelSpec};
use crate::laplace::{find_mode_from, Dataset, LaplaceState};
use crate::link::Link;
use crate::params::ModelParams;
use crate::predict::Posterior;

/// Objective change and simplex size below which a simplex run has converged.
pub const FTOL: f64 = 1e-8;
pub const XTOL: f64 = 1e-6;
/// Relative step of the numerical Hessian.
pub const HESSIAN_STEP: f64 = 1e-4;

pub fn to_unconstrained(params: &ModelParams) -> Result<DVector<f64>> {
    params.layout().to_unconstrained(params)
}

pub fn from_unconstrained(v: &DVector<f64>, layout: &ParamLayout) -> ModelParams {
    layout.from_unconstrained(v)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitOptions {
    /// Extra simplex runs from jittered default starting points.
    pub restarts: usize,
    /// Half-width of the uniform jitter on each unconstrained coordinate.
    pub jitter: f64,
    /// Edge length of the initial simplex.
    pub initial_step: f64,
    /// Evaluation budget per simplex run.
    pub max_evals: usize,
    /// Maximum number of restarted runs from the incumbent.
    pub max_polish: usize,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            restarts: 3,
            jitter: 0.5,
            initial_step: 0.5,
            max_evals: 4000,
            max_polish: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Simplex runs along the main chain (first run plus restarts from the
    /// incumbent).
    pub outer_iterations: usize,
    /// Simplex iterations summed over every run.
    pub simplex_iterations: usize,
    pub evaluations: usize,
    pub final_objective: f64,
    pub converged: bool,
    /// Largest relative asymmetry of the Hessian before symmetrizing.
    pub hessian_asymmetry: f64,
}

/// A fitted model: `θ̂`, the Laplace state at `θ̂`, and the observed
/// information in the unconstrained coordinates.
#[derive(Debug, Clone)]
pub struct FittedModel {
    pub params: ModelParams,
    pub layout: ParamLayout,
    pub data: Dataset,
    pub state: LaplaceState,
    /// `𝒥(θ̂, y)` in unconstrained coordinates.
    pub info: DMatrix<f64>,
    /// `𝒥⁻¹`, or `None` when `𝒥` is not positive definite.
    pub info_inverse: Option<DMatrix<f64>>,
    pub diagnostics: Diagnostics,
}

impl FittedModel {
    /// Reassembles a model from saved pieces without refitting.
    pub fn from_parts(
        params: ModelParams,
        data: Dataset,
        u_hat: DVector<f64>,
        info: DMatrix<f64>,
        diagnostics: Diagnostics,
    ) -> Result<Self> {
        params.validate()?;
        if u_hat.len() != data.m() {
            return Err(Error::Data(format!(
                "saved mode has {} entries, space has {} compounds",
                u_hat.len(),
                data.m()
            )));
        }
        let layout = params.layout();
        if info.nrows() != layout.dim() || info.ncols() != layout.dim() {
            return Err(Error::Data("information matrix has the wrong shape".into()));
        }
        let cov = crate::kernel::covariance_matrix(&params.kernel, data.space())?;
        let state = LaplaceState::at(&params, &data, cov, u_hat, 0)?;
        let info_inverse = invert_info(&info);
        Ok(FittedModel {
            params,
            layout,
            data,
            state,
            info,
            info_inverse,
            diagnostics,
        })
    }

    pub fn posterior(&self) -> Posterior<'_> {
        Posterior::new(&self.params, &self.data, &self.state)
    }

    pub fn loglik(&self) -> f64 {
        self.state.loglik
    }

    pub fn standard_errors(&self) -> Option<Vec<f64>> {
        standard_errors(self)
    }
}

fn invert_info(info: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    Cholesky::new(info.clone()).map(|c| c.inverse())
}

/// Starting point: intercepts through the link at the empirical cumulative
/// class frequencies, `β = 0`, `σ² = 1`, `φ = 0.5`.
pub fn default_init(data: &Dataset, family: KernelFamily, link: Link) -> ModelParams {
    let c = data.n_classes();
    let n = data.n() as f64;
    let counts = data.class_counts();
    let mut alphas = Vec::with_capacity(c - 1);
    let mut cum = 0.0;
    for &count in &counts[..c - 1] {
        // Half a count per class keeps empty classes off the boundary.
        cum += count as f64 + 0.5;
        let p = cum / (n + 0.5 * c as f64);
        let mut a = link.quantile(p);
        if let Some(&prev) = alphas.last() {
            if !(a > prev + 1e-3) {
                a = prev + 1e-3;
            }
        }
        alphas.push(a);
    }
    ModelParams {
        alphas,
        beta: vec![0.0; data.p()],
        kernel: KernelSpec {
            family,
            sigma2: 1.0,
            phi: if family.uses_phi() { 0.5 } else { 1.0 },
        },
        link,
    }
}

/// Negative Laplace log-likelihood over the unconstrained space, with the
/// inner Newton solve warm-started from the most recent mode.
struct Objective<'a> {
    data: &'a Dataset,
    layout: ParamLayout,
    warm: RefCell<Option<DVector<f64>>>,
    evals: RefCell<usize>,
}

impl<'a> Objective<'a> {
    fn new(data: &'a Dataset, layout: ParamLayout) -> Self {
        Objective {
            data,
            layout,
            warm: RefCell::new(None),
            evals: RefCell::new(0),
        }
    }

    fn state(&self, v: &DVector<f64>) -> Result<LaplaceState> {
        if v.iter().any(|x| !x.is_finite() || x.abs() > 50.0) {
            return Err(Error::Domain("parameter out of range".into()));
        }
        let params = self.layout.from_unconstrained(v);
        params.validate()?;
        let warm = self.warm.borrow().clone();
        let state = find_mode_from(&params, self.data, warm.as_ref())
            .or_else(|_| find_mode_from(&params, self.data, None))?;
        Ok(state)
    }

    fn eval(&self, v: &DVector<f64>) -> f64 {
        *self.evals.borrow_mut() += 1;
        match self.state(v) {
            Ok(s) if s.loglik.is_finite() => {
                *self.warm.borrow_mut() = Some(s.u_hat.clone());
                -s.loglik
            }
            _ => f64::INFINITY,
        }
    }
}

/// Outcome of one simplex run.
#[derive(Debug, Clone)]
pub struct SimplexResult {
    pub x: DVector<f64>,
    pub f: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
}

/// Nelder–Mead minimization with the standard coefficients (reflection 1,
/// expansion 2, contraction ½, shrink ½).
pub fn nelder_mead<F: FnMut(&DVector<f64>) -> f64>(
    mut f: F,
    x0: &DVector<f64>,
    step: f64,
    max_evals: usize,
) -> SimplexResult {
    let d = x0.len();
    let mut pts: Vec<DVector<f64>> = Vec::with_capacity(d + 1);
    pts.push(x0.clone());
    for k in 0..d {
        let mut p = x0.clone();
        p[k] += step;
        pts.push(p);
    }
    let mut vals: Vec<f64> = pts.iter().map(&mut f).collect();
    let mut evals = d + 1;
    let mut iterations = 0;
    let mut converged = false;

    while evals < max_evals {
        let mut order: Vec<usize> = (0..=d).collect();
        order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        pts = order.iter().map(|&i| pts[i].clone()).collect();
        vals = order.iter().map(|&i| vals[i]).collect();

        let size = pts[1..]
            .iter()
            .map(|p| (p - &pts[0]).amax())
            .fold(0.0, f64::max);
        if vals[d] - vals[0] < FTOL && size < XTOL {
            converged = true;
            break;
        }
        iterations += 1;

        let centroid = pts[..d].iter().fold(DVector::zeros(d), |acc, p| acc + p) / d as f64;
        let worst = &pts[d];
        let xr = &centroid + (&centroid - worst);
        let fr = f(&xr);
        evals += 1;
        if fr < vals[0] {
            let xe = &centroid + (&xr - &centroid) * 2.0;
            let fe = f(&xe);
            evals += 1;
            if fe < fr {
                pts[d] = xe;
                vals[d] = fe;
            } else {
                pts[d] = xr;
                vals[d] = fr;
            }
            continue;
        }
        if fr < vals[d - 1] {
            pts[d] = xr;
            vals[d] = fr;
            continue;
        }
        let (xc, fc) = if fr < vals[d] {
            let xc = &centroid + (&xr - &centroid) * 0.5;
            let fc = f(&xc);
            (xc, fc)
        } else {
            let xc = &centroid + (worst - &centroid) * 0.5;
            let fc = f(&xc);
            (xc, fc)
        };
        evals += 1;
        if fc < vals[d].min(fr) {
            pts[d] = xc;
            vals[d] = fc;
            continue;
        }
        let best = pts[0].clone();
        for i in 1..=d {
            pts[i] = &best + (&pts[i] - &best) * 0.5;
            vals[i] = f(&pts[i]);
        }
        evals += d;
    }
    let best = (0..=d)
        .min_by(|&a, &b| vals[a].total_cmp(&vals[b]))
        .expect("non-empty simplex");
    SimplexResult {
        x: pts[best].clone(),
        f: vals[best],
        iterations,
        evaluations: evals,
        converged,
    }
}

/// Maximizes the Laplace log-likelihood. `init` defaults to
/// [`default_init`].
pub fn fit_mle(
    data: &Dataset,
    family: KernelFamily,
    link: Link,
    init: Option<&ModelParams>,
    options: &FitOptions,
) -> Result<FittedModel> {
    let start = match init {
        Some(p) => {
            if p.kernel.family != family || p.link != link {
                return Err(Error::Config("initial parameters use a different kernel or link".into()));
            }
            p.clone()
        }
        None => default_init(data, family, link),
    };
    if start.n_classes() != data.n_classes() || start.beta.len() != data.p() {
        return Err(Error::Config("initial parameters do not match the data".into()));
    }
    let layout = start.layout();
    let v0 = layout.to_unconstrained(&start)?;
    let objective = Objective::new(data, layout);
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);

    let mut total_iters = 0;
    let run = |x: &DVector<f64>, step: f64, iters: &mut usize| {
        let r = nelder_mead(|v| objective.eval(v), x, step, options.max_evals);
        *iters += r.iterations;
        r
    };

    let mut best = run(&v0, options.initial_step, &mut total_iters);
    let default_v = layout.to_unconstrained(&default_init(data, family, link))?;
    for _ in 0..options.restarts {
        let jittered = default_v.map(|x| x + rng.random_range(-options.jitter..=options.jitter));
        let r = run(&jittered, options.initial_step, &mut total_iters);
        if r.f < best.f {
            best = r;
        }
    }
    if !best.f.is_finite() {
        return Err(Error::NumericalDegeneracy(
            "no starting point gave a finite likelihood".into(),
        ));
    }

    // Restart from the incumbent until a run stops improving it.
    let mut outer = 1;
    let mut converged = best.converged;
    for _ in 0..options.max_polish {
        let r = run(&best.x, 0.1 * options.initial_step, &mut total_iters);
        outer += 1;
        let improvement = best.f - r.f;
        if r.f < best.f {
            converged = r.converged;
            best = r;
        } else {
            converged = r.converged || converged;
        }
        if improvement < FTOL {
            break;
        }
    }
    if !converged {
        log::warn!("simplex did not meet its convergence tolerances");
    }

    let params = layout.from_unconstrained(&best.x);
    let state = find_mode_from(&params, data, None)?;
    let (info, asym) = observed_information(data, &params, &state)?;
    let info_inverse = invert_info(&info);
    if info_inverse.is_none() {
        log::warn!("observed information is not positive definite; standard errors unavailable");
    }
    let diagnostics = Diagnostics {
        outer_iterations: outer,
        simplex_iterations: total_iters,
        evaluations: *objective.evals.borrow(),
        final_objective: -state.loglik,
        converged,
        hessian_asymmetry: asym,
    };
    Ok(FittedModel {
        params,
        layout,
        data: data.clone(),
        state,
        info,
        info_inverse,
        diagnostics,
    })
}

/// Laplace log-likelihood over the unconstrained coordinates, each inner
/// solve warm-started from `u0`.
pub fn loglik_at(data: &Dataset, layout: &ParamLayout, v: &DVector<f64>, u0: Option<&DVector<f64>>) -> Result<f64> {
    let params = layout.from_unconstrained(v);
    params.validate()?;
    Ok(find_mode_from(&params, data, u0)?.loglik)
}

/// `-∇²ℓ̃` at `params` by central differences in the unconstrained
/// coordinates, and the relative asymmetry of the raw estimate.
pub fn observed_information(
    data: &Dataset,
    params: &ModelParams,
    state: &LaplaceState,
) -> Result<(DMatrix<f64>, f64)> {
    let layout = params.layout();
    let v = layout.to_unconstrained(params)?;
    let d = v.len();
    let h: Vec<f64> = v.iter().map(|x| HESSIAN_STEP * x.abs().max(1.0)).collect();
    let u0 = Some(&state.u_hat);
    let f = |dv: &[(usize, f64)]| -> Result<f64> {
        let mut w = v.clone();
        for &(k, s) in dv {
            w[k] += s;
        }
        loglik_at(data, &layout, &w, u0)
    };
    let f0 = state.loglik;
    let mut fp = vec![0.0; d];
    let mut fm = vec![0.0; d];
    for k in 0..d {
        fp[k] = f(&[(k, h[k])])?;
        fm[k] = f(&[(k, -h[k])])?;
    }
    let mut raw = DMatrix::zeros(d, d);
    for k in 0..d {
        raw[(k, k)] = (fp[k] - 2.0 * f0 + fm[k]) / (h[k] * h[k]);
        for l in (k + 1)..d {
            // Forward and backward-corner forms, one for each triangle.
            let fpp = f(&[(k, h[k]), (l, h[l])])?;
            let fmm = f(&[(k, -h[k]), (l, -h[l])])?;
            let fpm = f(&[(k, h[k]), (l, -h[l])])?;
            let fmp = f(&[(k, -h[k]), (l, h[l])])?;
            let upper = (fpp - fp[k] - fp[l] + 2.0 * f0 - fm[k] - fm[l] + fmm) / (2.0 * h[k] * h[l]);
            let lower = (fpp - fpm - fmp + fmm) / (4.0 * h[k] * h[l]);
            raw[(k, l)] = upper;
            raw[(l, k)] = lower;
        }
    }
    let scale = raw.amax().max(1e-300);
    let asym = (&raw - raw.transpose()).amax() / scale;
    let hess = (&raw + raw.transpose()) * 0.5;
    Ok((-hess, asym))
}

/// Delta-method standard errors on the natural scale `(α, β, σ², [φ])`.
pub fn standard_errors(model: &FittedModel) -> Option<Vec<f64>> {
    let inv = model.info_inverse.as_ref()?;
    let v = model.layout.to_unconstrained(&model.params).ok()?;
    let jac = model.layout.natural_jacobian(&v);
    let cov = &jac * inv * jac.transpose();
    Some(cov.diagonal().iter().map(|x| x.max(0.0).sqrt()).collect())
}
