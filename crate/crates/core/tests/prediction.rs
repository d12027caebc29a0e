mod common;

use std::sync::Arc;

use chemgp::chemspace::{build_space, Bits, Fingerprint};
use chemgp::discover::{fitness, FitnessKind, GAConfig};
use chemgp::fit::{fit_mle, FitOptions};
use chemgp::kernel::{KernelFamily, KernelSpec};
use chemgp::laplace::{find_mode, Dataset};
use chemgp::link::Link;
use chemgp::params::ModelParams;
use chemgp::predict::{
    gauss_hermite, mixture_probabilities, mixture_with_rule, predict, probit_class_probabilities, probit_closed_form,
    Posterior,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fp(s: &str) -> Fingerprint {
    Fingerprint::new(s.parse::<Bits>().unwrap()).unwrap()
}

fn params(alphas: Vec<f64>, beta: Vec<f64>, kernel: KernelSpec, link: Link) -> ModelParams {
    ModelParams::new(alphas, beta, kernel, link).unwrap()
}

fn tanimoto(a: &str, b: &str) -> f64 {
    let both = a.chars().zip(b.chars()).filter(|&(x, y)| x == '1' && y == '1').count();
    let either = a.chars().zip(b.chars()).filter(|&(x, y)| x == '1' || y == '1').count();
    both as f64 / either as f64
}

#[test]
fn two_compound_posterior_matches_dense_algebra() {
    let names = ["110100", "011100"];
    let candidate = "110110";
    let space = Arc::new(build_space(names.iter().map(|s| fp(s)).collect()).unwrap());
    let x = DMatrix::from_vec(5, 1, vec![0.0, 0.3, 0.6, 0.9, 0.1]);
    let data = Dataset::new(vec![1, 2, 3, 3, 2], x, vec![0, 0, 1, 1, 1], space, 3).unwrap();
    for family in [KernelFamily::Gaussian, KernelFamily::Exponential, KernelFamily::Tanimoto] {
        let spec = KernelSpec::new(family, 0.7, 0.6).unwrap();
        let p = params(vec![-0.4, 0.5], vec![0.8], spec, Link::Probit);
        let state = find_mode(&p, &data).unwrap();
        let post = Posterior::new(&p, &data, &state);
        let (mean, var) = post.posterior_u(&fp(candidate)).unwrap();

        let k_entry = |a: &str, b: &str| {
            let s = tanimoto(a, b);
            match family {
                KernelFamily::Tanimoto => 0.7 * s,
                _ => 0.7 * spec.correlation(1.0 - s).unwrap(),
            }
        };
        let k = DMatrix::from_fn(2, 2, |i, j| k_entry(names[i], names[j]) * if i == j { 1.0 + 1e-8 } else { 1.0 });
        let k_star = DVector::from_fn(2, |i, _| k_entry(names[i], candidate));
        let k_ss = 0.7;
        // W from second differences of the direct log-likelihood.
        let h = 1e-4;
        let mut w = DMatrix::zeros(2, 2);
        for l in 0..2 {
            let at = |d: f64| {
                let mut u = state.u_hat.clone();
                u[l] += d;
                common::direct_loglik(&p, &data, &u)
            };
            w[(l, l)] = -(at(h) - 2.0 * at(0.0) + at(-h)) / (h * h);
        }
        let k_inv = k.clone().try_inverse().unwrap();
        let dense_mean = (k_star.transpose() * &k_inv * &state.u_hat)[0];
        let kw = &k + w.map(|v| if v == 0.0 { 0.0 } else { 1.0 / v });
        let dense_var = k_ss - (k_star.transpose() * kw.try_inverse().unwrap() * &k_star)[0];
        assert!((mean - dense_mean).abs() < 1e-9, "{family}: mean {mean} vs {dense_mean}");
        assert!((var - dense_var).abs() < 1e-6, "{family}: var {var} vs {dense_var}");
    }
}

#[test]
fn logit_mixture_matches_adaptive_quadrature() {
    let spec = KernelSpec::new(KernelFamily::Tanimoto, 1.0, 1.0).unwrap();
    let p = params(vec![-1.0, 0.0], vec![], spec, Link::Logit);
    let q = mixture_probabilities(&p, 0.0, 0.0, 1.0);
    for j in 1..=3 {
        let f = |u: f64| {
            common::class_prob(Link::Logit, &[-1.0, 0.0], u, j) * (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt()
        };
        let exact = common::adaptive_simpson(&f, -14.0, 14.0, 1e-14);
        assert!((q[j - 1] - exact).abs() < 1e-7, "class {j}: {} vs {exact}", q[j - 1]);
    }
}

#[test]
fn quadrature_probit_example() {
    let spec = KernelSpec::new(KernelFamily::Tanimoto, 1.0, 1.0).unwrap();
    let p = params(vec![1.0], vec![], spec, Link::Probit);
    let q = mixture_probabilities(&p, 0.0, 0.0, 3.0);
    assert!((q[0] - 0.6915).abs() < 5e-5, "{}", q[0]);
    assert!((q[0] + q[1] - 1.0).abs() < 1e-15);
}

#[test]
fn quadrature_close_to_wide_reference() {
    let (z, w) = gauss_hermite(201);
    let spec = KernelSpec::new(KernelFamily::Tanimoto, 1.0, 1.0).unwrap();
    let mut worst: f64 = 0.0;
    for link in Link::ALL {
        let p = params(vec![-0.7, 0.4], vec![], spec, link);
        for i in 0..=12 {
            let mu = -3.0 + 0.5 * i as f64;
            for j in 0..=10 {
                let var = j as f64;
                let a = mixture_probabilities(&p, 0.0, mu, var);
                let b = mixture_with_rule(&p, 0.0, mu, var, &z, &w);
                for c in 0..3 {
                    worst = worst.max((a[c] - b[c]).abs());
                }
            }
        }
    }
    assert!(worst <= 1e-8, "max deviation from the 201-point rule: {worst:e}");
}

#[test]
fn probit_top_class_fitness_is_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (_, data) = common::random_instance(&mut rng, 5, 8, 40, 3, KernelFamily::Gaussian, Link::Probit);
    let model = fit_mle(&data, KernelFamily::Gaussian, Link::Probit, None, &FitOptions::default()).unwrap();
    let config = GAConfig {
        fitness: FitnessKind::MaxTopClassProb,
        x_star: Some(vec![0.5]),
        ..GAConfig::default()
    };
    let post = model.posterior();
    let xbeta = model.params.linear_predictor(&[0.5]);
    for code in [1u64, 7, 19, 31] {
        let bits = Bits::from_index(code, 5);
        let f = fitness(&model, &bits, &config).unwrap();
        let (mean, var) = post.posterior_u(&Fingerprint::new(bits).unwrap()).unwrap();
        let exact = probit_closed_form(f64::INFINITY, model.params.alphas[1], xbeta, mean, var);
        assert!((f - exact).abs() < 1e-6, "code {code}: {f} vs {exact}");
        let closed = probit_class_probabilities(&model.params, xbeta, mean, var).unwrap();
        assert!((closed[2] - exact).abs() < 1e-15);
    }
}

#[test]
fn corrected_variance_is_at_least_plain_variance() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (_, data) = common::random_instance(&mut rng, 6, 10, 60, 3, KernelFamily::Exponential, Link::Logit);
    let model = fit_mle(&data, KernelFamily::Exponential, Link::Logit, None, &FitOptions::default()).unwrap();
    for code in [3u64, 12, 40, 63] {
        let pred = predict(&model, &Fingerprint::new(Bits::from_index(code, 6)).unwrap(), &[0.0]).unwrap();
        let corrected = pred.var_u_corrected.expect("information is invertible");
        assert!(corrected >= pred.var_u, "code {code}: {corrected} < {}", pred.var_u);
        assert!((pred.class_probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn training_compound_posterior_is_the_mode() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (p, data) = common::random_instance(&mut rng, 6, 7, 30, 3, KernelFamily::Gaussian, Link::CLogLog);
    let state = find_mode(&p, &data).unwrap();
    let post = Posterior::new(&p, &data, &state);
    let h_inv = state.h_inverse();
    for r in 0..data.m() {
        let (mean, var) = post.posterior_u(data.space().compound(r)).unwrap();
        assert!((mean - state.u_hat[r]).abs() < 1e-8);
        assert!((var - h_inv[(r, r)]).abs() < 1e-8, "{var} vs {}", h_inv[(r, r)]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn mixture_is_a_distribution_and_monotone(
        a1 in -3.0f64..1.0,
        gap in 0.1f64..2.0,
        mu in -3.0f64..3.0,
        var in 0.0f64..10.0,
        shift in 0.01f64..1.0,
        link_index in 0usize..4,
    ) {
        let spec = KernelSpec::new(KernelFamily::Tanimoto, 1.0, 1.0).unwrap();
        let p = params(vec![a1, a1 + gap], vec![], spec, Link::ALL[link_index]);
        let lo = mixture_probabilities(&p, 0.0, mu, var);
        let hi = mixture_probabilities(&p, 0.0, mu + shift, var);
        prop_assert!((lo.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(lo.iter().all(|&q| (0.0..=1.0).contains(&q)));
        prop_assert!(hi[0] >= lo[0] - 1e-15);
        prop_assert!(hi[0] + hi[1] >= lo[0] + lo[1] - 1e-15);
    }
}
