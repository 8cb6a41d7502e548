//! Bound-constrained quasi-Newton maximization for the non-closed-form CM-steps.
//!
//! BFGS with an analytic gradient and Armijo backtracking, projected onto an
//! optional box. When the quasi-Newton direction cannot make progress the
//! search falls back to steepest ascent and then to a derivative-free compass
//! search before giving up.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimSettings {
    /// Outer quasi-Newton iterations.
    pub max_iterations: usize,
    /// Stationarity target on the projected-gradient max-norm.
    pub gradient_tolerance: f64,
}

impl Default for OptimSettings {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            gradient_tolerance: 1e-6,
        }
    }
}

/// Per-coordinate box. `lower[k] <= x[k] <= upper[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn uniform(dim: usize, lower: f64, upper: f64) -> Self {
        Self {
            lower: vec![lower; dim],
            upper: vec![upper; dim],
        }
    }

    fn project(&self, x: &mut [f64]) {
        for ((v, lo), hi) in x.iter_mut().zip(&self.lower).zip(&self.upper) {
            *v = v.clamp(*lo, *hi);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimStatus {
    /// Projected gradient below tolerance in the interior.
    Converged,
    /// Stationary with at least one coordinate pinned to the box.
    AtBound,
    /// Iteration budget spent; best point returned.
    BudgetExhausted,
    /// No direction (gradient or derivative-free) improves the objective further.
    Stalled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub start_value: f64,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub status: OptimStatus,
}

/// Maximizes a smooth objective. `objective(x, grad)` returns the value at `x`
/// and writes the gradient into `grad`.
///
/// The returned point never has a lower objective than `start`.
pub fn maximize<F>(
    mut objective: F,
    start: &[f64],
    settings: &OptimSettings,
    bounds: Option<&Bounds>,
) -> Result<OptimOutcome>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = start.len();
    if n == 0 {
        return Err(Error::InvalidInput(
            "optimizer called with zero dimensions".into(),
        ));
    }
    if let Some(b) = bounds {
        if b.lower.len() != n || b.upper.len() != n {
            return Err(Error::InvalidInput("bounds dimension mismatch".into()));
        }
    }

    // Minimize the negated objective internally.
    let mut eval = |x: &[f64], g: &mut [f64]| -> f64 {
        let v = objective(x, g);
        for gk in g.iter_mut() {
            *gk = -*gk;
        }
        -v
    };

    let mut x = start.to_vec();
    if let Some(b) = bounds {
        b.project(&mut x);
    }
    let mut g = vec![0.0; n];
    let mut f = eval(&x, &mut g);
    let start_value = -f;
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::OptimizerFailure(format!(
            "objective or gradient not finite at start ({start_value})"
        )));
    }

    let tol = settings.gradient_tolerance;
    let mut hinv = identity(n);
    let mut first_step = true;
    let mut x_new = vec![0.0; n];
    let mut g_new = vec![0.0; n];
    let mut dir = vec![0.0; n];
    let mut iterations = 0;
    let mut status = OptimStatus::BudgetExhausted;

    while iterations < settings.max_iterations {
        let active = active_set(&x, &g, bounds);
        let pg = projected_norm(&g, &active);
        if pg <= tol {
            status = if active.iter().any(|&a| a) {
                OptimStatus::AtBound
            } else {
                OptimStatus::Converged
            };
            break;
        }
        iterations += 1;

        // Quasi-Newton direction restricted to the free coordinates.
        for k in 0..n {
            dir[k] = if active[k] {
                0.0
            } else {
                -(0..n)
                    .filter(|&l| !active[l])
                    .map(|l| hinv[k][l] * g[l])
                    .sum::<f64>()
            };
        }
        let mut slope = dot(&dir, &g);
        if !(slope < 0.0) || first_step {
            // Scaled steepest descent on the first iteration or after a bad direction.
            let scale = if first_step { 1.0 / pg.max(1.0) } else { 1.0 };
            for k in 0..n {
                dir[k] = if active[k] { 0.0 } else { -g[k] * scale };
            }
            slope = dot(&dir, &g);
            hinv = identity(n);
        }

        let mut accepted = line_search(
            &mut eval,
            &x,
            f,
            max_abs(&g),
            &dir,
            slope,
            bounds,
            &mut x_new,
            &mut g_new,
        );
        if accepted.is_none() && !first_step {
            // Retry along the plain gradient.
            for k in 0..n {
                dir[k] = if active[k] { 0.0 } else { -g[k] };
            }
            slope = dot(&dir, &g);
            hinv = identity(n);
            accepted = line_search(
                &mut eval,
                &x,
                f,
                max_abs(&g),
                &dir,
                slope,
                bounds,
                &mut x_new,
                &mut g_new,
            );
        }
        let f_new = match accepted {
            Some(v) => v,
            None => match compass_search(&mut eval, &x, f, bounds, &mut x_new, &mut g_new) {
                Some(v) => v,
                None => {
                    status = OptimStatus::Stalled;
                    break;
                }
            },
        };

        // BFGS inverse-Hessian update with the usual curvature guard.
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let yv: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &yv);
        if sy > 1e-12 * norm2(&s) * norm2(&yv) && sy > 0.0 {
            if first_step {
                let yy = dot(&yv, &yv);
                let gamma = sy / yy;
                hinv = identity(n);
                for (k, row) in hinv.iter_mut().enumerate() {
                    row[k] = gamma;
                }
            }
            bfgs_update(&mut hinv, &s, &yv, sy);
            first_step = false;
        }

        let df = f - f_new;
        x.copy_from_slice(&x_new);
        g.copy_from_slice(&g_new);
        f = f_new;
        if df <= f.abs().max(1.0) * 1e-15 && s.iter().all(|v| v.abs() <= 1e-15) {
            status = OptimStatus::Stalled;
            break;
        }
    }

    // A tiny gradient can also mean an objective that keeps rising, ever more
    // slowly, towards the box. Probe the bound in the ascent direction.
    if status == OptimStatus::Converged {
        if let Some(b) = bounds {
            for k in 0..n {
                let target = if g[k] < 0.0 {
                    b.upper[k]
                } else if g[k] > 0.0 {
                    b.lower[k]
                } else {
                    continue;
                };
                if !target.is_finite() {
                    continue;
                }
                x_new.copy_from_slice(&x);
                x_new[k] = target;
                let fv = eval(&x_new, &mut g_new);
                if fv.is_finite() && fv < f {
                    x.copy_from_slice(&x_new);
                    g.copy_from_slice(&g_new);
                    f = fv;
                    status = OptimStatus::AtBound;
                }
            }
        }
    }

    if -f < start_value {
        // Steps accepted on gradient progress alone drifted below the start.
        x = start.to_vec();
        if let Some(b) = bounds {
            b.project(&mut x);
        }
        f = eval(&x, &mut g);
    }

    let active = active_set(&x, &g, bounds);
    let gradient_norm = projected_norm(&g, &active);
    if status == OptimStatus::BudgetExhausted && gradient_norm <= tol {
        status = if active.iter().any(|&a| a) {
            OptimStatus::AtBound
        } else {
            OptimStatus::Converged
        };
    }
    if status == OptimStatus::Stalled && active.iter().any(|&a| a) && gradient_norm <= tol {
        status = OptimStatus::AtBound;
    }
    Ok(OptimOutcome {
        x,
        value: -f,
        start_value,
        iterations,
        gradient_norm,
        status,
    })
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn identity(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| u * v).sum()
}

fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// A coordinate is active when it sits on a bound and the descent direction
/// points out of the box.
fn active_set(x: &[f64], g: &[f64], bounds: Option<&Bounds>) -> Vec<bool> {
    match bounds {
        None => vec![false; x.len()],
        Some(b) => x
            .iter()
            .zip(g)
            .enumerate()
            .map(|(k, (&xk, &gk))| (xk <= b.lower[k] && gk > 0.0) || (xk >= b.upper[k] && gk < 0.0))
            .collect(),
    }
}

fn projected_norm(g: &[f64], active: &[bool]) -> f64 {
    g.iter()
        .zip(active)
        .filter(|(_, &a)| !a)
        .map(|(v, _)| v.abs())
        .fold(0.0, f64::max)
}

fn bfgs_update(hinv: &mut [Vec<f64>], s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let hy: Vec<f64> = (0..n).map(|i| dot(&hinv[i], y)).collect();
    let yhy = dot(y, &hy);
    let rho = 1.0 / sy;
    for i in 0..n {
        for j in 0..n {
            hinv[i][j] += rho * ((1.0 + rho * yhy) * s[i] * s[j] - hy[i] * s[j] - s[i] * hy[j]);
        }
    }
}

/// Armijo backtracking with projection. Returns the accepted (minimized) value.
#[allow(clippy::too_many_arguments)]
fn line_search<F>(
    eval: &mut F,
    x: &[f64],
    f: f64,
    g_scale: f64,
    dir: &[f64],
    slope: f64,
    bounds: Option<&Bounds>,
    x_new: &mut [f64],
    g_new: &mut [f64],
) -> Option<f64>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    if !(slope < 0.0) {
        return None;
    }
    let mut t = 1.0;
    for _ in 0..60 {
        for k in 0..x.len() {
            x_new[k] = x[k] + t * dir[k];
        }
        if let Some(b) = bounds {
            b.project(x_new);
        }
        let fv = eval(x_new, g_new);
        if fv.is_finite() && g_new.iter().all(|v| v.is_finite()) {
            if fv <= f + 1e-4 * t * slope && fv < f {
                return Some(fv);
            }
            if fv < f && t < 1e-10 {
                return Some(fv);
            }
            // Below rounding resolution of f: progress is judged by the gradient.
            let flat = (fv - f).abs() <= 1e-13 * f.abs().max(1.0);
            if flat && max_abs(g_new) < 0.9 * g_scale {
                return Some(fv);
            }
        }
        t *= 0.5;
    }
    None
}

/// Derivative-free compass search used when gradient directions fail.
fn compass_search<F>(
    eval: &mut F,
    x: &[f64],
    f: f64,
    bounds: Option<&Bounds>,
    x_new: &mut [f64],
    g_new: &mut [f64],
) -> Option<f64>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let mut step = 0.1 * x.iter().map(|v| v.abs()).fold(1.0, f64::max);
    while step > 1e-12 {
        for k in 0..x.len() {
            for sign in [1.0, -1.0] {
                x_new.copy_from_slice(x);
                x_new[k] += sign * step;
                if let Some(b) = bounds {
                    b.project(x_new);
                }
                let fv = eval(x_new, g_new);
                if fv.is_finite() && fv < f {
                    return Some(fv);
                }
            }
        }
        step *= 0.25;
    }
    None
}
