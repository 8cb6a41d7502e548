//! E-step responsibilities and the individual conditional-maximization steps.

use crate::error::{Error, Result};
use crate::math::{ln_logistic, log_sum_exp, logistic};
use crate::model::{joint_log_terms, Dataset, ModelParams};
use crate::optimize::{maximize, Bounds, OptimOutcome, OptimSettings, OptimStatus};

/// Denominators of the lambda update below this mean the component has no responsibility left.
pub const LAMBDA_DENOMINATOR_FLOOR: f64 = 1e-300;

/// Posterior probabilities `e[i, j, m]` that observation `i` came from
/// component `(λ_j, α_m)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorWeights {
    r: usize,
    k1: usize,
    k2: usize,
    e: Vec<f64>,
}

impl PosteriorWeights {
    /// Wraps a flat array laid out as `((i * k1) + j) * k2 + m`.
    pub fn from_flat(r: usize, k1: usize, k2: usize, e: Vec<f64>) -> Result<Self> {
        if e.len() != r * k1 * k2 || r == 0 || k1 == 0 || k2 == 0 {
            return Err(Error::InvalidInput(
                "responsibility array has the wrong shape".into(),
            ));
        }
        if e.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidInput(
                "responsibilities must lie in [0, 1]".into(),
            ));
        }
        Ok(Self { r, k1, k2, e })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.r, self.k1, self.k2)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, m: usize) -> f64 {
        self.e[(i * self.k1 + j) * self.k2 + m]
    }

    /// The `k1 × k2` block of observation `i`.
    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.k1 * self.k2;
        &self.e[i * w..(i + 1) * w]
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.e
    }

    /// Removes G components `drop_g` and H components `drop_h` (indices into the current layout).
    pub(crate) fn without(&self, drop_g: &[usize], drop_h: &[usize]) -> Self {
        let keep_g: Vec<usize> = (0..self.k1).filter(|j| !drop_g.contains(j)).collect();
        let keep_h: Vec<usize> = (0..self.k2).filter(|m| !drop_h.contains(m)).collect();
        let mut e = Vec::with_capacity(self.r * keep_g.len() * keep_h.len());
        for i in 0..self.r {
            for &j in &keep_g {
                for &m in &keep_h {
                    e.push(self.get(i, j, m));
                }
            }
        }
        Self {
            r: self.r,
            k1: keep_g.len(),
            k2: keep_h.len(),
            e,
        }
    }

    /// Σ_j e[i, j, m] for every (i, m), laid out `i * k2 + m`.
    fn marginal_over_g(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.r * self.k2];
        for i in 0..self.r {
            for j in 0..self.k1 {
                for m in 0..self.k2 {
                    out[i * self.k2 + m] += self.get(i, j, m);
                }
            }
        }
        out
    }

    /// Σ_j e[i, j, m] λ_j for every (i, m).
    fn lambda_weighted(&self, lambda: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.r * self.k2];
        for i in 0..self.r {
            for (j, &l) in lambda.iter().enumerate() {
                for m in 0..self.k2 {
                    out[i * self.k2 + m] += self.get(i, j, m) * l;
                }
            }
        }
        out
    }
}

/// Responsibilities under `params`, normalized per observation in log space.
pub fn e_step(data: &Dataset, params: &ModelParams) -> Result<PosteriorWeights> {
    params.check_against(data)?;
    let (k1, k2) = (params.k1(), params.k2());
    let eta = data.linear_predictor(&params.beta);
    let ln_rho: Vec<f64> = params.g.weights().iter().map(|w| w.ln()).collect();
    let ln_pi: Vec<f64> = params.h.weights().iter().map(|w| w.ln()).collect();
    let mut e = vec![0.0; data.len() * k1 * k2];
    for (i, block) in e.chunks_exact_mut(k1 * k2).enumerate() {
        joint_log_terms(data, i, eta[i], params, &ln_rho, &ln_pi, block);
        let norm = log_sum_exp(block);
        if !norm.is_finite() {
            return Err(Error::DegenerateLikelihood { row: i });
        }
        for v in block.iter_mut() {
            *v = (*v - norm).exp();
        }
    }
    Ok(PosteriorWeights {
        r: data.len(),
        k1,
        k2,
        e,
    })
}

/// Weights of G: `ρ_j = r⁻¹ Σ_i Σ_m e_ijm`.
pub fn cm_step_rho(e: &PosteriorWeights) -> Vec<f64> {
    let mut rho = vec![0.0; e.k1];
    for i in 0..e.r {
        for (j, slot) in rho.iter_mut().enumerate() {
            for m in 0..e.k2 {
                *slot += e.get(i, j, m);
            }
        }
    }
    normalize_weights(rho)
}

/// Weights of H: `π_m = r⁻¹ Σ_i Σ_j e_ijm`.
pub fn cm_step_pi(e: &PosteriorWeights) -> Vec<f64> {
    let mut pi = vec![0.0; e.k2];
    for i in 0..e.r {
        for j in 0..e.k1 {
            for (m, slot) in pi.iter_mut().enumerate() {
                *slot += e.get(i, j, m);
            }
        }
    }
    normalize_weights(pi)
}

// Dividing by the realized total rather than r absorbs rounding in the row sums.
fn normalize_weights(mut w: Vec<f64>) -> Vec<f64> {
    let total: f64 = w.iter().sum();
    for v in w.iter_mut() {
        *v /= total;
    }
    w
}

/// Outcome of the closed-form lambda update for one G component.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum LambdaSlot {
    Value(f64),
    /// Denominator below [`LAMBDA_DENOMINATOR_FLOOR`].
    NoResponsibility,
    /// Every observation assigned to this component is zero.
    Zero,
}

pub(crate) fn lambda_slots(
    data: &Dataset,
    e: &PosteriorWeights,
    alpha_prev: &[f64],
    beta_prev: &[f64],
) -> Vec<LambdaSlot> {
    let eta = data.linear_predictor(beta_prev);
    let y = data.y();
    let mut num = vec![0.0; e.k1];
    let mut den = vec![0.0; e.k1];
    for i in 0..e.r {
        let p: Vec<f64> = alpha_prev.iter().map(|a| logistic(a + eta[i])).collect();
        for j in 0..e.k1 {
            for (m, pm) in p.iter().enumerate() {
                let w = e.get(i, j, m);
                num[j] += w * y[i] as f64;
                den[j] += w * pm;
            }
        }
    }
    num.into_iter()
        .zip(den)
        .map(|(n, d)| {
            if !(d >= LAMBDA_DENOMINATOR_FLOOR) {
                LambdaSlot::NoResponsibility
            } else if n <= 0.0 {
                LambdaSlot::Zero
            } else {
                LambdaSlot::Value(n / d)
            }
        })
        .collect()
}

/// Closed-form conditional maximizer of T₃ over λ given the previous α and β.
///
/// Components whose assigned observations are all zero come back as `0.0`;
/// a component without responsibility is a [`Error::DegenerateComponent`].
pub fn cm_step_lambda(
    data: &Dataset,
    e: &PosteriorWeights,
    alpha_prev: &[f64],
    beta_prev: &[f64],
) -> Result<Vec<f64>> {
    check_dims(data, e, alpha_prev.len(), beta_prev.len())?;
    lambda_slots(data, e, alpha_prev, beta_prev)
        .into_iter()
        .enumerate()
        .map(|(j, slot)| match slot {
            LambdaSlot::Value(v) => Ok(v),
            LambdaSlot::Zero => Ok(0.0),
            LambdaSlot::NoResponsibility => Err(Error::DegenerateComponent { index: j }),
        })
        .collect()
}

fn check_dims(data: &Dataset, e: &PosteriorWeights, k2: usize, p: usize) -> Result<()> {
    if e.r != data.len() || e.k2 != k2 || p != data.n_covariates() {
        return Err(Error::InvalidInput(
            "responsibilities, parameters and data disagree in shape".into(),
        ));
    }
    Ok(())
}

/// The α-dependent part of T₃ restricted to component `m`:
/// `Σ_i Σ_j e_ijm {y_i ln p(α + η_i) − λ_j p(α + η_i)}`, with its derivative.
///
/// `count_weight[i] = Σ_j e_ijm` and `size_weight[i] = Σ_j e_ijm λ_j`.
fn alpha_slice(
    y: &[u64],
    eta: &[f64],
    count_weight: &[f64],
    size_weight: &[f64],
    alpha: f64,
) -> (f64, f64) {
    let mut value = 0.0;
    let mut grad = 0.0;
    for i in 0..y.len() {
        let t = alpha + eta[i];
        let p = logistic(t);
        let a = count_weight[i] * y[i] as f64;
        let b = size_weight[i];
        if a > 0.0 {
            value += a * ln_logistic(t);
        }
        value -= b * p;
        grad += (1.0 - p) * (a - b * p);
    }
    (value, grad)
}

/// Value and gradient of the (λ, α)-conditional part of T₃ as a function of β.
fn beta_objective(
    data: &Dataset,
    alpha: &[f64],
    count_weight: &[f64],
    size_weight: &[f64],
    beta: &[f64],
    grad: &mut [f64],
) -> f64 {
    let k2 = alpha.len();
    let y = data.y();
    grad.iter_mut().for_each(|g| *g = 0.0);
    let mut value = 0.0;
    for (i, row) in data.rows().enumerate() {
        let eta: f64 = row.iter().zip(beta).map(|(x, b)| x * b).sum();
        let mut score = 0.0;
        for (m, &am) in alpha.iter().enumerate() {
            let t = am + eta;
            let p = logistic(t);
            let a = count_weight[i * k2 + m] * y[i] as f64;
            let b = size_weight[i * k2 + m];
            if a > 0.0 {
                value += a * ln_logistic(t);
            }
            value -= b * p;
            score += (1.0 - p) * (a - b * p);
        }
        for (g, x) in grad.iter_mut().zip(row) {
            *g += score * x;
        }
    }
    value
}

/// Full T₃(λ, α, β) = Σ e_ijm {y_i ln λ_j + y_i ln p(α_m + x_i'β) − λ_j p(α_m + x_i'β)}.
pub fn t3(
    data: &Dataset,
    e: &PosteriorWeights,
    lambda: &[f64],
    alpha: &[f64],
    beta: &[f64],
) -> f64 {
    let eta = data.linear_predictor(beta);
    let y = data.y();
    let mut total = 0.0;
    for i in 0..e.r {
        for (j, &l) in lambda.iter().enumerate() {
            for (m, &a) in alpha.iter().enumerate() {
                let w = e.get(i, j, m);
                if w == 0.0 {
                    continue;
                }
                let t = a + eta[i];
                let yi = y[i] as f64;
                let mut term = -l * logistic(t);
                if yi > 0.0 {
                    term += yi * (l.ln() + ln_logistic(t));
                }
                total += w * term;
            }
        }
    }
    total
}

/// Gradient of [`t3`] with respect to β.
pub fn t3_beta_gradient(
    data: &Dataset,
    e: &PosteriorWeights,
    lambda: &[f64],
    alpha: &[f64],
    beta: &[f64],
) -> Vec<f64> {
    let cw = e.marginal_over_g();
    let sw = e.lambda_weighted(lambda);
    let mut grad = vec![0.0; beta.len()];
    beta_objective(data, alpha, &cw, &sw, beta, &mut grad);
    grad
}

/// Result of one α or β conditional maximization.
#[derive(Debug, Clone, PartialEq)]
pub struct CmOutcome {
    pub values: Vec<f64>,
    /// Components whose optimizer stopped on the α box.
    pub at_bound: Vec<usize>,
    /// Components for which no ascent point was found; their previous value was retained.
    pub failed: Vec<usize>,
}

/// Conditional maximization of each α_m given the new λ and the previous β.
pub fn cm_step_alpha(
    data: &Dataset,
    e: &PosteriorWeights,
    lambda_new: &[f64],
    alpha_prev: &[f64],
    beta_prev: &[f64],
    settings: &OptimSettings,
    alpha_bound: f64,
) -> Result<CmOutcome> {
    check_dims(data, e, alpha_prev.len(), beta_prev.len())?;
    if lambda_new.len() != e.k1 {
        return Err(Error::InvalidInput("lambda length differs from K1".into()));
    }
    let eta = data.linear_predictor(beta_prev);
    let cw = e.marginal_over_g();
    let sw = e.lambda_weighted(lambda_new);
    let bounds = Bounds::uniform(1, -alpha_bound, alpha_bound);
    let mut out = CmOutcome {
        values: alpha_prev.to_vec(),
        at_bound: Vec::new(),
        failed: Vec::new(),
    };
    let k2 = e.k2;
    let y = data.y();
    for m in 0..k2 {
        let count: Vec<f64> = (0..e.r).map(|i| cw[i * k2 + m]).collect();
        let size: Vec<f64> = (0..e.r).map(|i| sw[i * k2 + m]).collect();
        let result = maximize(
            |a, g| {
                let (v, d) = alpha_slice(y, &eta, &count, &size, a[0]);
                g[0] = d;
                v
            },
            &[alpha_prev[m]],
            settings,
            Some(&bounds),
        );
        match result.and_then(accept_ascent) {
            Ok(o) => {
                if o.status == OptimStatus::AtBound {
                    out.at_bound.push(m);
                }
                out.values[m] = o.x[0];
            }
            Err(_) => out.failed.push(m),
        }
    }
    Ok(out)
}

/// Conditional maximization of β given the new λ and α.
pub fn cm_step_beta(
    data: &Dataset,
    e: &PosteriorWeights,
    lambda_new: &[f64],
    alpha_new: &[f64],
    beta_prev: &[f64],
    settings: &OptimSettings,
) -> Result<OptimOutcome> {
    check_dims(data, e, alpha_new.len(), beta_prev.len())?;
    let cw = e.marginal_over_g();
    let sw = e.lambda_weighted(lambda_new);
    let out = maximize(
        |b, g| beta_objective(data, alpha_new, &cw, &sw, b, g),
        beta_prev,
        settings,
        None,
    )?;
    accept_ascent(out)
}

/// Fails when the search neither improved the objective nor reached a stationary point.
fn accept_ascent(o: OptimOutcome) -> Result<OptimOutcome> {
    let stationary = matches!(o.status, OptimStatus::Converged | OptimStatus::AtBound);
    if o.value < o.start_value {
        return Err(Error::OptimizerFailure(
            "search returned a worse point".into(),
        ));
    }
    if !stationary && o.value <= o.start_value {
        return Err(Error::OptimizerFailure(format!(
            "no ascent within {} iterations (gradient {:.3e})",
            o.iterations, o.gradient_norm
        )));
    }
    Ok(o)
}
