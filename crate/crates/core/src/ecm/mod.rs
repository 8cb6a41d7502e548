//! ECM fitting of β, G and H for fixed numbers of support points.
//!
//! Each iteration runs one E-step followed by five conditional maximizations in
//! the fixed order ρ, π, λ, α, β. The closed-form steps for ρ, π and λ are exact;
//! α and β use the bounded quasi-Newton search in [`crate::optimize`].

mod init;
mod steps;

pub use init::{initialize, poisson_regression, InitSpec, IRLS_MAX_ITERATIONS};
pub use steps::{
    cm_step_alpha, cm_step_beta, cm_step_lambda, cm_step_pi, cm_step_rho, e_step, t3,
    t3_beta_gradient, CmOutcome, PosteriorWeights, LAMBDA_DENOMINATOR_FLOOR,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    mixture_log_likelihood, Dataset, Domain, MixingDistribution, ModelParams, WEIGHT_FLOOR,
};
use crate::optimize::OptimSettings;
use crate::selection::bic;
use steps::{lambda_slots, LambdaSlot};

/// Default master seed used by every entry point that takes one.
pub const DEFAULT_SEED: u64 = 20240101;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub max_iterations: usize,
    /// Absolute log-likelihood change below which the likelihood is considered stable.
    pub loglik_tolerance: f64,
    /// Max-norm change in (β, ρ, λ, π, α) below which the parameters are considered stable.
    pub param_tolerance: f64,
    pub inner: OptimSettings,
    /// α is confined to `[-alpha_bound, alpha_bound]`.
    pub alpha_bound: f64,
    pub init: InitSpec,
    pub multistart: MultiStart,
    pub seed: u64,
}

/// Short-run screening of several starting points before a full ECM run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MultiStart {
    /// Random starts added to the deterministic ones.
    pub random_starts: usize,
    /// ECM iterations each candidate gets before the best one is continued.
    pub screen_iterations: usize,
}

impl Default for MultiStart {
    fn default() -> Self {
        Self {
            random_starts: 8,
            screen_iterations: 200,
        }
    }
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_iterations: 2000,
            loglik_tolerance: 1e-8,
            param_tolerance: 1e-7,
            inner: OptimSettings::default(),
            alpha_bound: 50.0,
            init: InitSpec::default(),
            multistart: MultiStart::default(),
            seed: DEFAULT_SEED,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::InvalidInput(
                "max_iterations must be at least 1".into(),
            ));
        }
        if !(self.loglik_tolerance > 0.0 && self.param_tolerance > 0.0) {
            return Err(Error::InvalidInput("tolerances must be positive".into()));
        }
        if !(self.alpha_bound > 0.0) || self.inner.max_iterations == 0 {
            return Err(Error::InvalidInput(
                "invalid inner optimizer settings".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    ToleranceMet,
    MaxIterations,
    Degenerate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: ModelParams,
    pub loglik: f64,
    pub n_iterations: usize,
    pub converged: bool,
    pub reason: StopReason,
    /// Log-likelihood at the start value followed by one entry per iteration.
    pub trace: Vec<f64>,
    pub bic: f64,
    /// Support sizes requested by the caller.
    pub requested_k: (usize, usize),
    /// Support sizes after any component drops.
    pub k1: usize,
    pub k2: usize,
    /// The likelihood stopped moving while the parameters did not: the
    /// λ·p(α) direction is (nearly) flat at the final iterate.
    pub ridge: bool,
    /// Some α component finished on its box bound in the last iteration.
    pub alpha_at_bound: bool,
    pub final_param_change: f64,
    pub final_loglik_change: f64,
}

/// Runs `initialize` and then the ECM iteration.
pub fn fit(data: &Dataset, k1: usize, k2: usize, config: &FitConfig) -> Result<FitResult> {
    config.validate()?;
    let start = initialize(data, k1, k2, config.seed, &config.init)?;
    fit_from(data, start, config)
}

/// ECM iteration from explicit starting parameters.
pub fn fit_from(data: &Dataset, start: ModelParams, config: &FitConfig) -> Result<FitResult> {
    config.validate()?;
    start.validate()?;
    start.check_against(data)?;
    let requested_k = (start.k1(), start.k2());
    let mut params = start;
    let mut loglik = mixture_log_likelihood(data, &params)?;
    let mut trace = vec![loglik];
    let mut reason = StopReason::MaxIterations;
    let mut alpha_at_bound = false;
    let mut d_theta = f64::INFINITY;
    let mut d_ll = f64::INFINITY;

    for _ in 0..config.max_iterations {
        let next = match ecm_iteration(data, &params, config) {
            Ok(v) => v,
            Err(Error::DegenerateLikelihood { .. }) | Err(Error::DegenerateComponent { .. }) => {
                reason = StopReason::Degenerate;
                break;
            }
            Err(e) => return Err(e),
        };
        let next_ll = match mixture_log_likelihood(data, &next.params) {
            Ok(v) => v,
            Err(Error::DegenerateLikelihood { .. }) => {
                reason = StopReason::Degenerate;
                break;
            }
            Err(e) => return Err(e),
        };
        alpha_at_bound = next.alpha_at_bound;
        d_ll = (next_ll - loglik).abs();
        d_theta = if next.params.k1() == params.k1() && next.params.k2() == params.k2() {
            param_change(&params, &next.params)
        } else {
            f64::INFINITY
        };
        params = next.params;
        loglik = next_ll;
        trace.push(loglik);
        if d_ll < config.loglik_tolerance && d_theta < config.param_tolerance {
            reason = StopReason::ToleranceMet;
            break;
        }
    }

    let (k1, k2) = (params.k1(), params.k2());
    Ok(FitResult {
        bic: bic(loglik, k1, k2, data.len(), data.n_covariates()),
        n_iterations: trace.len() - 1,
        converged: reason == StopReason::ToleranceMet,
        ridge: reason != StopReason::ToleranceMet
            && d_ll < config.loglik_tolerance
            && d_theta >= config.param_tolerance,
        params,
        loglik,
        reason,
        trace,
        requested_k,
        k1,
        k2,
        alpha_at_bound,
        final_param_change: d_theta,
        final_loglik_change: d_ll,
    })
}

/// Screens `extra_starts`, the default initialization and
/// `config.multistart.random_starts` random starts for
/// `config.multistart.screen_iterations` iterations each, then continues the
/// candidate with the highest log-likelihood. Candidates are ranked in order,
/// so the result is deterministic; the first candidate wins ties.
///
/// Random starts are drawn around `anchor` (by default the unjittered `(1, 1)`
/// initialization): λ scaled by U(0.25, 2), α shifted by U(-2w, 2w) with `w`
/// the initial α half-width, β scaled by U(0.5, 2).
pub fn fit_multistart(
    data: &Dataset,
    k1: usize,
    k2: usize,
    extra_starts: Vec<ModelParams>,
    anchor: Option<&ModelParams>,
    config: &FitConfig,
) -> Result<FitResult> {
    config.validate()?;
    let default_anchor;
    let anchor = match anchor {
        Some(a) => a,
        None => {
            default_anchor = initialize(
                data,
                1,
                1,
                config.seed,
                &InitSpec {
                    jitter: 0.0,
                    ..config.init
                },
            )?;
            &default_anchor
        }
    };
    let mut candidates = extra_starts;
    candidates.push(initialize(data, k1, k2, config.seed, &config.init)?);
    candidates.extend(random_starts(anchor, k1, k2, config)?);

    let screen = config
        .multistart
        .screen_iterations
        .min(config.max_iterations)
        .max(1);
    let screen_cfg = FitConfig {
        max_iterations: screen,
        ..config.clone()
    };
    let mut best: Option<FitResult> = None;
    let mut last_err = None;
    for start in candidates {
        match fit_from(data, start, &screen_cfg) {
            Ok(f) if f.reason != StopReason::Degenerate => {
                if best.as_ref().is_none_or(|b| f.loglik > b.loglik) {
                    best = Some(f);
                }
            }
            Ok(_) => {}
            Err(e) => last_err = Some(e),
        }
    }
    let mut best = match (best, last_err) {
        (Some(b), _) => b,
        (None, Some(e)) => return Err(e),
        (None, None) => return Err(Error::DegenerateLikelihood { row: 0 }),
    };
    best.requested_k = (k1, k2);
    let remaining = config.max_iterations.saturating_sub(best.n_iterations);
    if best.converged || remaining == 0 {
        return Ok(best);
    }
    let cont_cfg = FitConfig {
        max_iterations: remaining,
        ..config.clone()
    };
    let mut rest = fit_from(data, best.params.clone(), &cont_cfg)?;
    let mut trace = best.trace;
    trace.extend_from_slice(&rest.trace[1..]);
    rest.n_iterations = trace.len() - 1;
    rest.trace = trace;
    rest.requested_k = (k1, k2);
    Ok(rest)
}

/// [`fit_multistart`] anchored at the `(1, 1)` ECM fit: that fit grown to
/// `(k1, k2)` is an extra start and the random starts are drawn around it.
pub fn fit_best(data: &Dataset, k1: usize, k2: usize, config: &FitConfig) -> Result<FitResult> {
    let base = fit(data, 1, 1, config)?;
    let start = crate::selection::grow(&base.params, k1, k2);
    fit_multistart(data, k1, k2, vec![start], Some(&base.params), config)
}

/// Random support points around the data-implied sizes, with β from the
/// Poisson regression start rescaled by a random factor in [0.5, 2].
fn random_starts(
    anchor: &ModelParams,
    k1: usize,
    k2: usize,
    config: &FitConfig,
) -> Result<Vec<ModelParams>> {
    use rand::{Rng, SeedableRng};
    let n = config.multistart.random_starts;
    let lambda0 = anchor.g.mean();
    let alpha0 = anchor.h.mean();
    let mut rng =
        rand_chacha::ChaCha8Rng::seed_from_u64(config.seed ^ ((k1 as u64) << 32 | k2 as u64));
    let w = 2.0 * config.init.alpha_half_width;
    (0..n)
        .map(|_| {
            let lambda: Vec<f64> = (0..k1)
                .map(|_| lambda0 * rng.random_range(0.25..2.0))
                .collect();
            let alpha: Vec<f64> = (0..k2).map(|_| alpha0 + rng.random_range(-w..w)).collect();
            let scale = rng.random_range(0.5..2.0);
            let beta = anchor.beta.iter().map(|b| b * scale).collect();
            let g = MixingDistribution::new(lambda, vec![1.0 / k1 as f64; k1], Domain::Positive)?;
            let h =
                MixingDistribution::new(alpha, vec![1.0 / k2 as f64; k2], Domain::Unrestricted)?;
            ModelParams::new(beta, g, h)
        })
        .collect()
}

struct Iterate {
    params: ModelParams,
    alpha_at_bound: bool,
}

/// One E-step and the five CM-steps.
fn ecm_iteration(data: &Dataset, current: &ModelParams, config: &FitConfig) -> Result<Iterate> {
    let mut e = e_step(data, current)?;
    let mut rho = cm_step_rho(&e);
    let mut pi = cm_step_pi(&e);
    let mut alpha_prev = current.h.support().to_vec();
    let slots = lambda_slots(data, &e, &alpha_prev, &current.beta);

    let drop_g: Vec<usize> = (0..rho.len())
        .filter(|&j| rho[j] < WEIGHT_FLOOR || !matches!(slots[j], LambdaSlot::Value(_)))
        .collect();
    let drop_h: Vec<usize> = (0..pi.len()).filter(|&m| pi[m] < WEIGHT_FLOOR).collect();
    if drop_g.len() == rho.len() {
        return Err(Error::DegenerateComponent { index: 0 });
    }
    if drop_h.len() == pi.len() {
        return Err(Error::DegenerateLikelihood { row: 0 });
    }
    let mut lambda: Vec<f64> = slots
        .iter()
        .enumerate()
        .filter(|(j, _)| !drop_g.contains(j))
        .map(|(_, s)| match s {
            LambdaSlot::Value(v) => *v,
            _ => unreachable!("dropped above"),
        })
        .collect();
    if !drop_g.is_empty() || !drop_h.is_empty() {
        rho = renormalized_without(&rho, &drop_g);
        pi = renormalized_without(&pi, &drop_h);
        alpha_prev = alpha_prev
            .into_iter()
            .enumerate()
            .filter(|(m, _)| !drop_h.contains(m))
            .map(|(_, a)| a)
            .collect();
        e = e.without(&drop_g, &drop_h);
    }

    let alpha_step = cm_step_alpha(
        data,
        &e,
        &lambda,
        &alpha_prev,
        &current.beta,
        &config.inner,
        config.alpha_bound,
    )?;
    let alpha = alpha_step.values;
    let beta = match cm_step_beta(data, &e, &lambda, &alpha, &current.beta, &config.inner) {
        Ok(o) => o.x,
        Err(Error::OptimizerFailure(_)) => current.beta.clone(),
        Err(err) => return Err(err),
    };

    // Keep every λ strictly positive even if a ratio underflows.
    for l in lambda.iter_mut() {
        *l = l.max(f64::MIN_POSITIVE);
    }
    let g = MixingDistribution::canonical(lambda, rho, Domain::Positive);
    let h = MixingDistribution::canonical(alpha, pi, Domain::Unrestricted);
    Ok(Iterate {
        params: ModelParams { beta, g, h },
        alpha_at_bound: !alpha_step.at_bound.is_empty(),
    })
}

fn renormalized_without(w: &[f64], drop: &[usize]) -> Vec<f64> {
    let kept: Vec<f64> = w
        .iter()
        .enumerate()
        .filter(|(k, _)| !drop.contains(k))
        .map(|(_, v)| *v)
        .collect();
    let total: f64 = kept.iter().sum();
    kept.into_iter().map(|v| v / total).collect()
}

/// Max-norm of the change in (β, ρ, λ, π, α); both sides must have equal K.
pub fn param_change(a: &ModelParams, b: &ModelParams) -> f64 {
    let pairs = [
        (&a.beta[..], &b.beta[..]),
        (a.g.weights(), b.g.weights()),
        (a.g.support(), b.g.support()),
        (a.h.weights(), b.h.weights()),
        (a.h.support(), b.h.support()),
    ];
    pairs
        .iter()
        .flat_map(|(u, v)| u.iter().zip(v.iter()).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn intercept_only_poisson_recovers_sample_mean() {
        let y = vec![3, 7, 4, 6, 5, 9, 2, 4];
        let data = Dataset::new(y.clone(), vec![vec![0.0]; y.len()]).unwrap();
        let res = fit(&data, 1, 1, &FitConfig::default()).unwrap();
        let ybar = y.iter().sum::<u64>() as f64 / y.len() as f64;
        let mean = crate::model::fitted_values(&data, &res.params)[0];
        assert!((mean - ybar).abs() < 1e-6, "{mean} vs {ybar}");
    }

    #[test]
    fn trace_is_monotone() {
        let y = vec![0, 3, 12, 25, 40, 2, 5, 18, 30, 45];
        let rows = (0..10).map(|i| vec![(i % 5) as f64 - 2.0]).collect();
        let data = Dataset::new(y, rows).unwrap();
        let res = fit(&data, 2, 2, &FitConfig::default()).unwrap();
        for w in res.trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-8, "{} -> {}", w[0], w[1]);
        }
        let expected_bic =
            -2.0 * res.loglik + (10f64).ln() * (2.0 * (res.k1 + res.k2) as f64 - 2.0 + 1.0);
        assert!((res.bic - expected_bic).abs() < 1e-9);
    }

    #[test]
    fn zero_iterations_rejected() {
        let cfg = FitConfig {
            max_iterations: 0,
            ..FitConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
