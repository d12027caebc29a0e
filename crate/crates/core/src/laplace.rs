//! Laplace approximation of the marginal likelihood.
//!
//! The compound effects `u ~ N(0, K)` are integrated out around the mode of
//! `g(u) = -log f(y|u) - log f(u)`. Newton iterations run on the whitened
//! effects `v = L⁻¹u` (with `K = LLᵀ`), where the Hessian of `g` is
//! `A = I + Lᵀ W L` and `W = -Pᵀ Ψ₂ P` is diagonal. This never forms `K⁻¹`,
//! and `log|Ĥ| = log|A| - log|K|`, so the approximate log-likelihood is
//!
//! `ℓ(y|û) - ½ ûᵀK⁻¹û - ½ log|A|`
//!
//! including every `2π` and `|K|` constant.

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::chemspace::ChemicalSpace;
use crate::error::{Error, Result};
use crate::kernel::{covariance_dlogphi, covariance_matrix, Covariance};
use crate::link::{b_terms_unchecked, BTerms};
use crate::params::{ModelParams, ParamLayout};

pub const NEWTON_TOL: f64 = 1e-8;
pub const NEWTON_MAX_ITER: usize = 100;
pub const MAX_HALVINGS: usize = 30;
/// Relative Newton decrement treated as converged.
pub const STAGNATION: f64 = 1e-15;
/// Ceiling on diagonal loading of the Hessian, relative to `trace/m`.
pub const MAX_LOADING: f64 = 1e-6;

/// Observations `(x_i, y_i, c_{l_i})` over a chemical space.
#[derive(Debug, Clone)]
pub struct Dataset {
    y: Vec<usize>,
    x: DMatrix<f64>,
    compound: Vec<usize>,
    space: Arc<ChemicalSpace>,
    n_classes: usize,
}

impl Dataset {
    /// `y` holds 1-based classes, `compound` 0-based positions in `space`,
    /// and `x` is `n × p`.
    pub fn new(
        y: Vec<usize>,
        x: DMatrix<f64>,
        compound: Vec<usize>,
        space: Arc<ChemicalSpace>,
        n_classes: usize,
    ) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(Error::Data("dataset has no observations".into()));
        }
        if n_classes < 2 {
            return Err(Error::Data("at least two classes required".into()));
        }
        if compound.len() != n || x.nrows() != n {
            return Err(Error::Data(format!(
                "row counts disagree: {n} labels, {} compounds, {} covariate rows",
                compound.len(),
                x.nrows()
            )));
        }
        if let Some((i, &c)) = y.iter().enumerate().find(|(_, &c)| c < 1 || c > n_classes) {
            return Err(Error::Data(format!("row {i}: class {c} outside 1..={n_classes}")));
        }
        if let Some((i, &l)) = compound.iter().enumerate().find(|(_, &l)| l >= space.len()) {
            return Err(Error::Data(format!(
                "row {i}: compound index {l} outside space of {}",
                space.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("covariates must be finite".into()));
        }
        let data = Dataset {
            y,
            x,
            compound,
            space,
            n_classes,
        };
        let counts = data.class_counts();
        for (j, &c) in counts.iter().enumerate() {
            if c == 0 {
                log::warn!("class {} has no observations; its intercepts are weakly identified", j + 1);
            }
        }
        Ok(data)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn m(&self) -> usize {
        self.space.len()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn y(&self) -> &[usize] {
        &self.y
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn x_row(&self, i: usize) -> Vec<f64> {
        self.x.row(i).iter().copied().collect()
    }

    pub fn compound_index(&self) -> &[usize] {
        &self.compound
    }

    pub fn space(&self) -> &ChemicalSpace {
        &self.space
    }

    pub fn space_arc(&self) -> &Arc<ChemicalSpace> {
        &self.space
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &c in &self.y {
            counts[c - 1] += 1;
        }
        counts
    }

    /// The rows at `rows`, over a space restricted to the compounds they use
    /// (in order of first appearance).
    pub fn subset(&self, rows: &[usize]) -> Result<Dataset> {
        let mut remap = vec![usize::MAX; self.m()];
        let mut kept = Vec::new();
        let mut compound = Vec::with_capacity(rows.len());
        for &i in rows {
            let l = self.compound[i];
            if remap[l] == usize::MAX {
                remap[l] = kept.len();
                kept.push(l);
            }
            compound.push(remap[l]);
        }
        let space = Arc::new(self.space.subset(&kept));
        let y = rows.iter().map(|&i| self.y[i]).collect();
        let x = self.x.select_rows(rows);
        Dataset::new(y, x, compound, space, self.n_classes)
    }

    /// Same rows in a different order; the space is unchanged.
    pub fn permute_rows(&self, order: &[usize]) -> Dataset {
        Dataset {
            y: order.iter().map(|&i| self.y[i]).collect(),
            x: self.x.select_rows(order),
            compound: order.iter().map(|&i| self.compound[i]).collect(),
            space: Arc::clone(&self.space),
            n_classes: self.n_classes,
        }
    }
}

/// `β⊤x_i` for every row.
fn offsets(params: &ModelParams, data: &Dataset) -> Vec<f64> {
    (0..data.n())
        .map(|i| {
            params
                .beta
                .iter()
                .enumerate()
                .map(|(k, b)| b * data.x[(i, k)])
                .sum()
        })
        .collect()
}

fn check_shapes(params: &ModelParams, data: &Dataset) -> Result<()> {
    if params.n_classes() != data.n_classes {
        return Err(Error::Config(format!(
            "model has {} classes, data has {}",
            params.n_classes(),
            data.n_classes
        )));
    }
    if params.beta.len() != data.p() {
        return Err(Error::Config(format!(
            "model has {} coefficients, data has {} covariates",
            params.beta.len(),
            data.p()
        )));
    }
    Ok(())
}

/// `η_{ij} = α_j + β⊤x_i + u_{l_i}` with `η_{i0} = -∞` and `η_{iC} = +∞`.
pub fn eta(params: &ModelParams, data: &Dataset, u: &DVector<f64>, i: usize, j: usize) -> f64 {
    if j == 0 {
        return f64::NEG_INFINITY;
    }
    if j >= params.n_classes() {
        return f64::INFINITY;
    }
    params.alphas[j - 1] + params.linear_predictor(&data.x_row(i)) + u[data.compound[i]]
}

fn row_terms(params: &ModelParams, data: &Dataset, offsets: &[f64], u: &DVector<f64>) -> Vec<BTerms> {
    let c = params.n_classes();
    (0..data.n())
        .map(|i| {
            let base = offsets[i] + u[data.compound[i]];
            let y = data.y[i];
            let upper = if y < c { params.alphas[y - 1] + base } else { f64::INFINITY };
            let lower = if y > 1 { params.alphas[y - 2] + base } else { f64::NEG_INFINITY };
            b_terms_unchecked(params.link, upper, lower)
        })
        .collect()
}

/// `Σᵢ log(G(η_{i,yᵢ}) - G(η_{i,yᵢ-1}))`.
pub fn categorical_loglik(params: &ModelParams, data: &Dataset, u: &DVector<f64>) -> Result<f64> {
    check_shapes(params, data)?;
    for w in params.alphas.windows(2) {
        if !(w[1] > w[0]) {
            return Err(Error::Ordering("intercepts must be strictly increasing".into()));
        }
    }
    let off = offsets(params, data);
    Ok(row_terms(params, data, &off, u).iter().map(|t| t.prob.ln()).sum())
}

/// Per-row `Ψ₁` and the diagonal of `Ψ₂`.
pub fn score_and_psi(
    params: &ModelParams,
    data: &Dataset,
    u: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    check_shapes(params, data)?;
    let off = offsets(params, data);
    let terms = row_terms(params, data, &off, u);
    let psi1 = DVector::from_iterator(terms.len(), terms.iter().map(|t| t.b1));
    let psi2 = DVector::from_iterator(terms.len(), terms.iter().map(BTerms::psi2));
    Ok((psi1, psi2))
}

/// Objective pieces at one value of the effects.
struct Eval {
    loglik: f64,
    grad: DVector<f64>,
    weights: DVector<f64>,
    terms: Vec<BTerms>,
}

fn evaluate(params: &ModelParams, data: &Dataset, offsets: &[f64], u: &DVector<f64>) -> Eval {
    let terms = row_terms(params, data, offsets, u);
    let m = data.m();
    let mut grad = DVector::zeros(m);
    let mut weights = DVector::zeros(m);
    let mut loglik = 0.0;
    for (i, t) in terms.iter().enumerate() {
        let l = data.compound[i];
        grad[l] += t.b1;
        weights[l] -= t.psi2();
        loglik += t.prob.ln();
    }
    Eval {
        loglik,
        grad,
        weights,
        terms,
    }
}

/// Cholesky of `I + Lᵀ W L`, with bounded diagonal loading as a fallback.
fn whitened_hessian(l: &DMatrix<f64>, weights: &DVector<f64>) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let m = l.nrows();
    let mut wl = l.clone();
    for (r, mut row) in wl.row_iter_mut().enumerate() {
        row *= weights[r];
    }
    let mut a = l.tr_mul(&wl);
    for i in 0..m {
        a[(i, i)] += 1.0;
    }
    if let Some(chol) = Cholesky::new(a.clone()) {
        return Ok((chol, 0.0));
    }
    let load = MAX_LOADING * a.trace() / m as f64;
    for i in 0..m {
        a[(i, i)] += load;
    }
    match Cholesky::new(a) {
        Some(chol) => {
            log::warn!("Laplace Hessian needed diagonal loading {load:e}");
            Ok((chol, load))
        }
        None => Err(Error::IndefiniteHessian),
    }
}

fn log_det_chol(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Everything the Laplace approximation produces at one `θ`.
#[derive(Debug, Clone)]
pub struct LaplaceState {
    pub u_hat: DVector<f64>,
    /// `K⁻¹û`.
    pub k_inv_u: DVector<f64>,
    pub psi1: DVector<f64>,
    pub psi2: DVector<f64>,
    /// Approximate marginal log-likelihood.
    pub loglik: f64,
    /// `log|Ĥ|`.
    pub log_det_h: f64,
    pub newton_iters: usize,
    /// `‖K⁻¹û - PᵀΨ₁‖∞` at the returned mode.
    pub score_residual: f64,
    /// Diagonal loading applied to the whitened Hessian (0 when none).
    pub loading: f64,
    cov: Covariance,
    a_chol: Cholesky<f64, Dyn>,
    terms: Vec<BTerms>,
}

impl LaplaceState {
    /// Assembles the state at a given `û` without iterating. Used both at the
    /// end of the Newton loop and when reloading a saved model, so the two
    /// paths agree bit for bit.
    pub fn at(
        params: &ModelParams,
        data: &Dataset,
        cov: Covariance,
        u_hat: DVector<f64>,
        newton_iters: usize,
    ) -> Result<Self> {
        check_shapes(params, data)?;
        let off = offsets(params, data);
        let ev = evaluate(params, data, &off, &u_hat);
        let l = cov.l();
        let (a_chol, loading) = whitened_hessian(&l, &ev.weights)?;
        let v = cov.solve_lower(&u_hat);
        let k_inv_u = cov.solve_upper(&v);
        let score_residual = (&k_inv_u - &ev.grad).amax();
        let log_det_a = log_det_chol(&a_chol);
        let loglik = ev.loglik - 0.5 * v.dot(&v) - 0.5 * log_det_a;
        let n = ev.terms.len();
        Ok(LaplaceState {
            psi1: DVector::from_iterator(n, ev.terms.iter().map(|t| t.b1)),
            psi2: DVector::from_iterator(n, ev.terms.iter().map(BTerms::psi2)),
            u_hat,
            k_inv_u,
            loglik,
            log_det_h: log_det_a - cov.log_det(),
            newton_iters,
            score_residual,
            loading,
            cov,
            a_chol,
            terms: ev.terms,
        })
    }

    pub fn covariance(&self) -> &Covariance {
        &self.cov
    }

    /// `aᵀ A⁻¹ a` where `a = L⁻¹ b`; equals `bᵀ K⁻¹ Ĥ⁻¹ K⁻¹ b`.
    pub fn whitened_quad(&self, a: &DVector<f64>) -> f64 {
        let z = self
            .a_chol
            .l_dirty()
            .solve_lower_triangular(a)
            .expect("positive diagonal");
        z.dot(&z)
    }

    /// `Ĥ⁻¹ b = L A⁻¹ Lᵀ b`.
    pub fn h_solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let l = self.cov.l();
        let lt_b = l.tr_mul(b);
        &l * self.a_chol.solve(&lt_b)
    }

    /// Dense `Ĥ⁻¹`.
    pub fn h_inverse(&self) -> DMatrix<f64> {
        let l = self.cov.l();
        &l * self.a_chol.inverse() * l.transpose()
    }

    pub fn row_terms(&self) -> &[BTerms] {
        &self.terms
    }
}

/// Newton mode search from `u = 0`.
pub fn find_mode(params: &ModelParams, data: &Dataset) -> Result<LaplaceState> {
    find_mode_from(params, data, None)
}

/// Newton mode search from `init` (or zero), with step halving.
pub fn find_mode_from(
    params: &ModelParams,
    data: &Dataset,
    init: Option<&DVector<f64>>,
) -> Result<LaplaceState> {
    check_shapes(params, data)?;
    params.validate()?;
    let cov = covariance_matrix(&params.kernel, data.space())?;
    let l = cov.l();
    let m = data.m();
    let off = offsets(params, data);

    let mut v = match init {
        Some(u0) if u0.len() == m && u0.iter().all(|x| x.is_finite()) => cov.solve_lower(u0),
        _ => DVector::zeros(m),
    };
    let objective = |ev: &Eval, v: &DVector<f64>| -ev.loglik + 0.5 * v.dot(v);

    let mut u = &l * &v;
    let mut ev = evaluate(params, data, &off, &u);
    let mut obj = objective(&ev, &v);
    let mut residual = f64::INFINITY;
    for iter in 0..=NEWTON_MAX_ITER {
        let grad_v = &v - l.tr_mul(&ev.grad);
        residual = cov.solve_upper(&grad_v).amax();
        let psi_scale = ev.terms.iter().fold(1.0f64, |acc, t| acc.max(t.b1.abs()));
        let converged = residual <= NEWTON_TOL * psi_scale;
        if !converged && iter == NEWTON_MAX_ITER {
            break;
        }
        let (a_chol, _) = whitened_hessian(&l, &ev.weights)?;
        let step = -a_chol.solve(&grad_v);
        // Newton decrement at round-off: an ill-conditioned K keeps the
        // u-space residual above tolerance although no step can improve g.
        let decrement = -grad_v.dot(&step);
        let stagnated = decrement <= STAGNATION * (1.0 + obj.abs());
        if converged || stagnated {
            if stagnated && !converged {
                log::debug!("Newton stopped at round-off with score residual {residual:e}");
            }
            // log|A| moves with û at first order, so one more full step
            // takes the mode from tolerance to round-off.
            let v_new = &v + &step;
            let u_new = &l * &v_new;
            let obj_new = objective(&evaluate(params, data, &off, &u_new), &v_new);
            if obj_new.is_finite() && obj_new <= obj + 1e-13 * (1.0 + obj.abs()) {
                u = u_new;
            }
            return LaplaceState::at(params, data, cov, u, iter);
        }

        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..=MAX_HALVINGS {
            let v_new = &v + &step * t;
            let u_new = &l * &v_new;
            let ev_new = evaluate(params, data, &off, &u_new);
            let obj_new = objective(&ev_new, &v_new);
            if obj_new.is_finite() && obj_new <= obj {
                v = v_new;
                u = u_new;
                ev = ev_new;
                obj = obj_new;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            // No representable decrease left: accept if the whitened gradient
            // is at round-off level.
            if grad_v.amax() <= 1e-9 * psi_scale.max(v.amax()) {
                return LaplaceState::at(params, data, cov, u, iter);
            }
            return Err(Error::ModeFailure {
                iterations: iter,
                residual,
            });
        }
    }
    Err(Error::ModeFailure {
        iterations: NEWTON_MAX_ITER,
        residual,
    })
}

/// Laplace-approximate log-likelihood and the state it was computed from.
pub fn approx_loglik(params: &ModelParams, data: &Dataset) -> Result<(f64, LaplaceState)> {
    let state = find_mode(params, data)?;
    Ok((state.loglik, state))
}

/// `∂û/∂v_k` for every unconstrained coordinate `v_k`, by implicit
/// differentiation of the score equation `K⁻¹û = PᵀΨ₁(û, θ)`:
/// `Ĥ ∂û = K⁻¹(∂K)K⁻¹û + Pᵀ ∂Ψ₁/∂θ`. Returns an `m × dim` matrix.
pub fn mode_sensitivity(
    params: &ModelParams,
    data: &Dataset,
    state: &LaplaceState,
    layout: &ParamLayout,
) -> Result<DMatrix<f64>> {
    let v = layout.to_unconstrained(params)?;
    let dim = layout.dim();
    let m = data.m();
    let na = layout.n_alpha();
    let alpha_jac = layout.alpha_jacobian(&v);
    let mut rhs = DMatrix::zeros(m, dim);

    for (i, t) in state.terms.iter().enumerate() {
        let l = data.compound[i];
        let y = data.y[i];
        // dΨ₁ᵢ/dα_j for the (at most two) intercepts bounding class y.
        let mut d_alpha = vec![0.0; na];
        if y <= na {
            d_alpha[y - 1] += t.db1_upper;
        }
        if y >= 2 {
            d_alpha[y - 2] += t.db1_lower;
        }
        for k in 0..na {
            let mut s = 0.0;
            for (j, d) in d_alpha.iter().enumerate() {
                s += d * alpha_jac[(j, k)];
            }
            rhs[(l, k)] += s;
        }
        let psi2 = t.psi2();
        for k in 0..layout.p {
            rhs[(l, na + k)] += data.x[(i, k)] * psi2;
        }
    }
    // ∂K/∂log σ² = K, so K⁻¹(∂K)K⁻¹û = K⁻¹û.
    rhs.column_mut(layout.sigma2_index()).copy_from(&state.k_inv_u);
    if let Some(pi) = layout.phi_index() {
        let dk = covariance_dlogphi(&params.kernel, data.space()).expect("family has phi");
        let col = state.cov.solve(&(dk * &state.k_inv_u));
        rhs.column_mut(pi).copy_from(&col);
    }

    let mut out = DMatrix::zeros(m, dim);
    for k in 0..dim {
        let col = state.h_solve(&rhs.column(k).into_owned());
        out.column_mut(k).copy_from(&col);
    }
    Ok(out)
}

/// Log-likelihood of the plain cumulative-link model (all effects zero).
pub fn fixed_effects_loglik(params: &ModelParams, data: &Dataset) -> Result<f64> {
    categorical_loglik(params, data, &DVector::zeros(data.m()))
}
