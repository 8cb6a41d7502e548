//! Library results checked against independent computations done here by hand.

use binmix::ecm::{
    cm_step_alpha, cm_step_beta, cm_step_lambda, cm_step_pi, cm_step_rho, e_step, t3_beta_gradient,
};
use binmix::math::logistic;
use binmix::optimize::OptimSettings;
use binmix::{
    component_log_density, fitted_values, mixture_log_likelihood, Dataset, Domain,
    MixingDistribution, ModelParams,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Poisson pmf by direct multiplication, no logarithms.
fn raw_pmf(y: u64, mean: f64) -> f64 {
    let mut v = (-mean).exp();
    for k in 1..=y {
        v *= mean / k as f64;
    }
    v
}

fn raw_terms(data: &Dataset, p: &ModelParams, i: usize) -> Vec<f64> {
    let t: f64 = data.row(i).iter().zip(&p.beta).map(|(x, b)| x * b).sum();
    let mut out = Vec::new();
    for (l, r) in p.g.support().iter().zip(p.g.weights()) {
        for (a, w) in p.h.support().iter().zip(p.h.weights()) {
            let q = 1.0 / (1.0 + (-(a + t)).exp());
            out.push(r * w * raw_pmf(data.y()[i], l * q));
        }
    }
    out
}

fn random_instance(
    rng: &mut ChaCha8Rng,
    r: usize,
    k1: usize,
    k2: usize,
    p: usize,
) -> (Dataset, ModelParams) {
    let rows: Vec<Vec<f64>> = (0..r)
        .map(|_| (0..p).map(|_| rng.random_range(-1.5..1.5)).collect())
        .collect();
    let y: Vec<u64> = (0..r).map(|_| rng.random_range(0..25)).collect();
    let weights = |rng: &mut ChaCha8Rng, k: usize| {
        let w: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
        let s: f64 = w.iter().sum();
        w.into_iter().map(|v| v / s).collect::<Vec<_>>()
    };
    let lambda: Vec<f64> = (0..k1)
        .map(|j| 5.0 + 12.0 * j as f64 + rng.random_range(0.0..4.0))
        .collect();
    let alpha: Vec<f64> = (0..k2)
        .map(|m| -1.0 + 1.1 * m as f64 + rng.random_range(0.0..0.5))
        .collect();
    let g = MixingDistribution::new(lambda, weights(rng, k1), Domain::Positive).unwrap();
    let h = MixingDistribution::new(alpha, weights(rng, k2), Domain::Unrestricted).unwrap();
    let beta = (0..p).map(|_| rng.random_range(-1.0..1.0)).collect();
    (
        Dataset::new(y, rows).unwrap(),
        ModelParams::new(beta, g, h).unwrap(),
    )
}

/// Golden-section maximum of a unimodal function on [lo, hi].
fn golden_max(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - g * (hi - lo);
    let mut d = lo + g * (hi - lo);
    let (mut fc, mut fd) = (f(c), f(d));
    while hi - lo > 1e-11 * (1.0 + lo.abs() + hi.abs()) {
        if fc > fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - g * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + g * (hi - lo);
            fd = f(d);
        }
    }
    (lo + hi) / 2.0
}

/// The expected complete-data objective over λ, α, β written out directly.
fn t3_direct(
    data: &Dataset,
    e: &[f64],
    k1: usize,
    k2: usize,
    lambda: &[f64],
    alpha: &[f64],
    beta: &[f64],
) -> f64 {
    let mut total = 0.0;
    for i in 0..data.len() {
        let t: f64 = data.row(i).iter().zip(beta).map(|(x, b)| x * b).sum();
        let y = data.y()[i] as f64;
        for j in 0..k1 {
            for m in 0..k2 {
                let w = e[(i * k1 + j) * k2 + m];
                let mean = lambda[j] * logistic(alpha[m] + t);
                total += w * (y * mean.ln() - mean);
            }
        }
    }
    total
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn likelihood_matches_raw_arithmetic(seed in any::<u64>(), r in 1usize..=5, k1 in 1usize..=3, k2 in 1usize..=3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (data, params) = random_instance(&mut rng, r, k1, k2, 2);
        let oracle: f64 = (0..r).map(|i| raw_terms(&data, &params, i).iter().sum::<f64>().ln()).sum();
        let ll = mixture_log_likelihood(&data, &params).unwrap();
        prop_assert!((ll - oracle).abs() < 1e-9 * oracle.abs().max(1.0), "{ll} vs {oracle}");
    }

    #[test]
    fn responsibilities_match_raw_arithmetic(seed in any::<u64>(), r in 1usize..=5, k1 in 1usize..=3, k2 in 1usize..=3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (data, params) = random_instance(&mut rng, r, k1, k2, 2);
        let e = e_step(&data, &params).unwrap();
        for i in 0..r {
            let raw = raw_terms(&data, &params, i);
            let total: f64 = raw.iter().sum();
            for (got, want) in e.row(i).iter().zip(&raw) {
                prop_assert!((got - want / total).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn likelihood_ignores_support_order(seed in any::<u64>(), k1 in 2usize..=3, k2 in 2usize..=3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (data, params) = random_instance(&mut rng, 6, k1, k2, 1);
        let rev = |d: &MixingDistribution| {
            let s: Vec<f64> = d.support().iter().rev().copied().collect();
            let w: Vec<f64> = d.weights().iter().rev().copied().collect();
            MixingDistribution::new(s, w, d.domain()).unwrap()
        };
        let permuted = ModelParams::new(params.beta.clone(), rev(&params.g), rev(&params.h)).unwrap();
        let a = mixture_log_likelihood(&data, &params).unwrap();
        let b = mixture_log_likelihood(&data, &permuted).unwrap();
        prop_assert!((a - b).abs() < 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn logistic_is_symmetric(t in -700.0f64..700.0) {
        prop_assert!((logistic(t) + logistic(-t) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn component_density_sums_to_one(lambda in 0.1f64..60.0, alpha in -3.0f64..3.0, x in -2.0f64..2.0, b in -1.0f64..1.0) {
        let total: f64 = (0..400u64).map(|y| component_log_density(y, &[x], &[b], lambda, alpha).unwrap().exp()).sum();
        prop_assert!((total - 1.0).abs() < 1e-10);
    }

    #[test]
    fn fitted_values_match_brute_force(seed in any::<u64>(), k1 in 1usize..=3, k2 in 1usize..=3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (data, params) = random_instance(&mut rng, 5, k1, k2, 2);
        let fitted = fitted_values(&data, &params);
        for (i, f) in fitted.iter().enumerate() {
            let t: f64 = data.row(i).iter().zip(&params.beta).map(|(x, b)| x * b).sum();
            let mut want = 0.0;
            for (l, r) in params.g.support().iter().zip(params.g.weights()) {
                for (a, w) in params.h.support().iter().zip(params.h.weights()) {
                    want += r * w * l / (1.0 + (-(a + t)).exp());
                }
            }
            prop_assert!((f - want).abs() < 1e-12 * want.max(1.0));
        }
    }
}

#[test]
fn weight_steps_match_direct_sums() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (data, params) = random_instance(&mut rng, 4, 3, 2, 1);
    let e = e_step(&data, &params).unwrap();
    let flat = e.as_flat();
    let rho = cm_step_rho(&e);
    let pi = cm_step_pi(&e);
    for j in 0..3 {
        let mut s = 0.0;
        for i in 0..4 {
            for m in 0..2 {
                s += flat[(i * 3 + j) * 2 + m];
            }
        }
        assert!((rho[j] - s / 4.0).abs() < 1e-12);
    }
    for m in 0..2 {
        let s: f64 = (0..4)
            .flat_map(|i| (0..3).map(move |j| (i, j)))
            .map(|(i, j)| flat[(i * 3 + j) * 2 + m])
            .sum();
        assert!((pi[m] - s / 4.0).abs() < 1e-12);
    }
}

#[test]
fn closed_form_weight_steps_maximize_their_objective() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let (data, params) = random_instance(&mut rng, 6, 2, 2, 1);
        let e = e_step(&data, &params).unwrap();
        let flat = e.as_flat().to_vec();
        let mass = |j_or_m: usize, over_g: bool| -> f64 {
            (0..6)
                .map(|i| {
                    (0..2)
                        .map(|o| {
                            if over_g {
                                flat[(i * 2 + j_or_m) * 2 + o]
                            } else {
                                flat[(i * 2 + o) * 2 + j_or_m]
                            }
                        })
                        .sum::<f64>()
                })
                .sum()
        };
        let (a0, a1) = (mass(0, true), mass(1, true));
        let rho0 = golden_max(|w| a0 * w.ln() + a1 * (1.0 - w).ln(), 1e-12, 1.0 - 1e-12);
        assert!((cm_step_rho(&e)[0] - rho0).abs() < 1e-6);
        let (b0, b1) = (mass(0, false), mass(1, false));
        let pi0 = golden_max(|w| b0 * w.ln() + b1 * (1.0 - w).ln(), 1e-12, 1.0 - 1e-12);
        assert!((cm_step_pi(&e)[0] - pi0).abs() < 1e-6);
    }
}

#[test]
fn lambda_step_maximizes_its_slice() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let (data, params) = random_instance(&mut rng, 5, 2, 2, 1);
        let e = e_step(&data, &params).unwrap();
        let flat = e.as_flat().to_vec();
        let alpha = params.h.support().to_vec();
        let lambda = cm_step_lambda(&data, &e, &alpha, &params.beta).unwrap();
        for j in 0..2 {
            let obj = |l: f64| {
                let mut lam = lambda.clone();
                lam[j] = l;
                t3_direct(&data, &flat, 2, 2, &lam, &alpha, &params.beta)
            };
            let best = golden_max(obj, 1e-6, 10.0 * lambda[j] + 10.0);
            assert!(
                (lambda[j] - best).abs() < 1e-6 * best.max(1.0),
                "{} vs {best}",
                lambda[j]
            );
        }
    }
}

#[test]
fn alpha_step_matches_golden_section() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let (data, params) = random_instance(&mut rng, 5, 2, 2, 1);
        let e = e_step(&data, &params).unwrap();
        let flat = e.as_flat().to_vec();
        let lambda = params.g.support().to_vec();
        let settings = OptimSettings {
            max_iterations: 500,
            gradient_tolerance: 1e-10,
        };
        let out = cm_step_alpha(
            &data,
            &e,
            &lambda,
            params.h.support(),
            &params.beta,
            &settings,
            50.0,
        )
        .unwrap();
        for m in 0..2 {
            let obj = |a: f64| {
                let mut al = out.values.clone();
                al[m] = a;
                t3_direct(&data, &flat, 2, 2, &lambda, &al, &params.beta)
            };
            let best = golden_max(obj, -50.0, 50.0);
            let (got, want) = (obj(out.values[m]), obj(best));
            assert!(
                got >= want - 1e-12 * want.abs().max(1.0),
                "{got} below {want}"
            );
            // A saturated logistic leaves the objective flat in floating point.
            let flat = (got - want).abs() <= 1e-12 * want.abs().max(1.0);
            assert!(
                flat || (out.values[m] - best).abs() < 1e-6,
                "{} vs {best}",
                out.values[m]
            );
        }
    }
}

#[test]
fn beta_step_matches_golden_section() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let (data, params) = random_instance(&mut rng, 5, 2, 2, 1);
        let e = e_step(&data, &params).unwrap();
        let flat = e.as_flat().to_vec();
        let lambda = params.g.support().to_vec();
        let alpha = params.h.support().to_vec();
        let settings = OptimSettings {
            max_iterations: 500,
            gradient_tolerance: 1e-10,
        };
        let out = cm_step_beta(&data, &e, &lambda, &alpha, &params.beta, &settings).unwrap();
        let best = golden_max(
            |b| t3_direct(&data, &flat, 2, 2, &lambda, &alpha, &[b]),
            -30.0,
            30.0,
        );
        assert!((out.x[0] - best).abs() < 1e-5, "{} vs {best}", out.x[0]);
    }
}

#[test]
fn beta_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (data, params) = random_instance(&mut rng, 5, 3, 2, 3);
    let e = e_step(&data, &params).unwrap();
    let flat = e.as_flat().to_vec();
    let lambda = params.g.support().to_vec();
    let alpha = params.h.support().to_vec();
    let grad = t3_beta_gradient(&data, &e, &lambda, &alpha, &params.beta);
    let h = 1e-6;
    for k in 0..3 {
        let mut up = params.beta.clone();
        up[k] += h;
        let mut down = params.beta.clone();
        down[k] -= h;
        let fd = (t3_direct(&data, &flat, 3, 2, &lambda, &alpha, &up)
            - t3_direct(&data, &flat, 3, 2, &lambda, &alpha, &down))
            / (2.0 * h);
        assert!(
            (grad[k] - fd).abs() < 1e-5 * fd.abs().max(1.0),
            "{} vs {fd}",
            grad[k]
        );
    }
}

#[test]
fn beta_step_is_stationary() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (data, params) = random_instance(&mut rng, 5, 2, 2, 2);
    let e = e_step(&data, &params).unwrap();
    let lambda = params.g.support().to_vec();
    let alpha = params.h.support().to_vec();
    let out = cm_step_beta(
        &data,
        &e,
        &lambda,
        &alpha,
        &params.beta,
        &OptimSettings::default(),
    )
    .unwrap();
    let grad = t3_beta_gradient(&data, &e, &lambda, &alpha, &out.x);
    assert!(grad.iter().all(|g| g.abs() < 1e-4), "{grad:?}");
}
