//! Independent reference computations used by the integration tests. None of
//! these call into the library's numerical code paths beyond the link CDFs.
#![allow(dead_code)]

use std::sync::Arc;

use chemgp::chemspace::{build_space, Bits, Fingerprint};
use chemgp::kernel::{correlation_matrix, KernelFamily, KernelSpec};
use chemgp::laplace::Dataset;
use chemgp::link::Link;
use chemgp::params::ModelParams;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Adaptive Simpson quadrature on `[a, b]`.
pub fn adaptive_simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
    fn rec<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
            return left + right + (left + right - whole) / 15.0;
        }
        rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    rec(f, a, b, fa, fm, fb, whole, tol, 50)
}

/// Root of `f` on `[a, b]` by bisection; `f(a)` and `f(b)` must differ in sign.
pub fn bisect<F: Fn(f64) -> f64>(f: F, mut a: f64, mut b: f64) -> f64 {
    let fa = f(a);
    assert!(fa * f(b) <= 0.0, "bracket does not change sign");
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        if (f(m) > 0.0) == (fa > 0.0) {
            a = m;
        } else {
            b = m;
        }
    }
    0.5 * (a + b)
}

/// Class probability of `y` (1-based) computed directly from the CDF.
pub fn class_prob(link: Link, alphas: &[f64], eta_shift: f64, y: usize) -> f64 {
    let c = alphas.len() + 1;
    let hi = if y == c { 1.0 } else { link.cdf(alphas[y - 1] + eta_shift) };
    let lo = if y == 1 { 0.0 } else { link.cdf(alphas[y - 2] + eta_shift) };
    hi - lo
}

/// Direct `Σ log π_{i,y_i}` by looping over rows.
pub fn direct_loglik(params: &ModelParams, data: &Dataset, u: &DVector<f64>) -> f64 {
    (0..data.n())
        .map(|i| {
            let xb: f64 = params.beta.iter().zip(data.x_row(i)).map(|(b, x)| b * x).sum();
            class_prob(params.link, &params.alphas, xb + u[data.compound_index()[i]], data.y()[i]).ln()
        })
        .sum()
}

/// Dense covariance with the library's jitter convention.
pub fn dense_k(spec: &KernelSpec, data: &Dataset) -> DMatrix<f64> {
    let mut k = correlation_matrix(spec, data.space());
    for i in 0..k.nrows() {
        k[(i, i)] += 1e-8 * spec.sigma2;
    }
    k
}

/// Importance-sampling estimate of `log ∫ f(y|u) N(u; 0, K) du` with a
/// Gaussian proposal `N(mean, cov)`; returns the estimate and its standard
/// error on the log scale.
pub fn importance_sampling_loglik(
    params: &ModelParams,
    data: &Dataset,
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    draws: usize,
    seed: u64,
) -> (f64, f64) {
    let m = mean.len();
    let k = dense_k(&params.kernel, data);
    let k_chol = k.clone().cholesky().expect("K positive definite");
    let k_logdet = 2.0 * k_chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let q_chol = cov.clone().cholesky().expect("proposal covariance positive definite");
    let lq = q_chol.l();
    let q_logdet = 2.0 * lq.diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut logw = Vec::with_capacity(draws);
    for _ in 0..draws {
        let z = DVector::from_iterator(m, (0..m).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)));
        let u = mean + &lq * &z;
        let prior = -0.5 * k_chol.solve(&u).dot(&u) - 0.5 * k_logdet;
        let prop = -0.5 * z.dot(&z) - 0.5 * q_logdet;
        logw.push(direct_loglik(params, data, &u) + prior - prop);
    }
    let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logw.iter().map(|l| (l - max).exp()).collect();
    let n = draws as f64;
    let mean_w = w.iter().sum::<f64>() / n;
    let var_w = w.iter().map(|x| (x - mean_w).powi(2)).sum::<f64>() / (n - 1.0);
    (max + mean_w.ln(), (var_w / n).sqrt() / mean_w)
}

/// Small random dataset: `m` distinct compounds of `kappa` features, `n`
/// rows, `c` classes, one covariate.
pub fn random_instance(
    rng: &mut ChaCha8Rng,
    kappa: usize,
    m: usize,
    n: usize,
    c: usize,
    family: KernelFamily,
    link: Link,
) -> (ModelParams, Dataset) {
    let total = (1u64 << kappa) - 1;
    let mut codes: Vec<u64> = Vec::new();
    while codes.len() < m {
        let code = rng.random_range(1..=total);
        if !codes.contains(&code) {
            codes.push(code);
        }
    }
    let fps: Vec<Fingerprint> = codes
        .iter()
        .map(|&c| Fingerprint::new(Bits::from_index(c, kappa)).unwrap())
        .collect();
    let space = Arc::new(build_space(fps).unwrap());
    let compound: Vec<usize> = (0..n).map(|i| if i < m { i } else { rng.random_range(0..m) }).collect();
    let y: Vec<usize> = (0..n).map(|i| if i < c { i + 1 } else { rng.random_range(1..=c) }).collect();
    let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let data = Dataset::new(y, DMatrix::from_vec(n, 1, x), compound, space, c).unwrap();
    let mut alphas = vec![rng.random_range(-1.5..0.0)];
    for _ in 1..c - 1 {
        let last = *alphas.last().unwrap();
        alphas.push(last + rng.random_range(0.3..1.5));
    }
    let kernel = KernelSpec::new(family, rng.random_range(0.2..1.0), rng.random_range(0.3..1.0)).unwrap();
    let params = ModelParams::new(alphas, vec![rng.random_range(-1.0..1.0)], kernel, link).unwrap();
    (params, data)
}

/// Fits a binary GLM `Pr(y = 1) = G(α + xβ)` by Newton on numerical
/// derivatives of the direct log-likelihood.
pub fn glm_fit(link: Link, y: &[usize], x: &[f64], start: [f64; 2]) -> [f64; 2] {
    let ll = |t: [f64; 2]| -> f64 {
        y.iter()
            .zip(x)
            .map(|(&yi, &xi)| class_prob(link, &[t[0]], t[1] * xi, yi).ln())
            .sum()
    };
    let mut t = start;
    let h = 1e-5;
    for _ in 0..100 {
        let f = |a: f64, b: f64| ll([a, b]);
        let g = [
            (f(t[0] + h, t[1]) - f(t[0] - h, t[1])) / (2.0 * h),
            (f(t[0], t[1] + h) - f(t[0], t[1] - h)) / (2.0 * h),
        ];
        let haa = (f(t[0] + h, t[1]) - 2.0 * f(t[0], t[1]) + f(t[0] - h, t[1])) / (h * h);
        let hbb = (f(t[0], t[1] + h) - 2.0 * f(t[0], t[1]) + f(t[0], t[1] - h)) / (h * h);
        let hab = (f(t[0] + h, t[1] + h) - f(t[0] + h, t[1] - h) - f(t[0] - h, t[1] + h) + f(t[0] - h, t[1] - h))
            / (4.0 * h * h);
        let det = haa * hbb - hab * hab;
        let step = [(hbb * g[0] - hab * g[1]) / det, (haa * g[1] - hab * g[0]) / det];
        t = [t[0] - step[0], t[1] - step[1]];
        if step[0].abs().max(step[1].abs()) < 1e-10 {
            break;
        }
    }
    t
}
