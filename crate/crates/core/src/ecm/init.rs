//! Starting values: a log-link Poisson regression for β, quantile-based G and
//! an evenly spaced H.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{logistic, quantile};
use crate::model::{Dataset, Domain, MixingDistribution, ModelParams};

pub const IRLS_MAX_ITERATIONS: usize = 25;
const IRLS_TOLERANCE: f64 = 1e-8;
/// Smallest initial lambda support point.
const LAMBDA_FLOOR: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitSpec {
    /// Initial α support is spread evenly over `[-alpha_half_width, alpha_half_width]`.
    pub alpha_half_width: f64,
    /// Relative jitter applied to every support point.
    pub jitter: f64,
}

impl Default for InitSpec {
    fn default() -> Self {
        Self {
            alpha_half_width: 1.5,
            jitter: 0.05,
        }
    }
}

/// Initial parameters for a `(k1, k2)` fit. Deterministic in `seed`.
pub fn initialize(
    data: &Dataset,
    k1: usize,
    k2: usize,
    seed: u64,
    spec: &InitSpec,
) -> Result<ModelParams> {
    if k1 == 0 || k2 == 0 {
        return Err(Error::InvalidInput("k1 and k2 must be at least 1".into()));
    }
    let beta = poisson_regression(data).unwrap_or_else(|| vec![0.0; data.n_covariates()]);
    let eta = data.linear_predictor(&beta);
    // Zero counts say nothing about the size, so they are left out when possible.
    let mut implied_sizes: Vec<f64> = data
        .y()
        .iter()
        .zip(&eta)
        .filter(|(&y, _)| y > 0)
        .map(|(&y, &t)| y as f64 / logistic(t))
        .collect();
    if implied_sizes.is_empty() {
        implied_sizes.push(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lambda: Vec<f64> = (1..=k1)
        .map(|j| quantile(&implied_sizes, (j as f64 - 0.5) / k1 as f64).max(LAMBDA_FLOOR))
        .collect();
    let mut alpha: Vec<f64> = if k2 == 1 {
        vec![0.0]
    } else {
        let w = spec.alpha_half_width;
        (0..k2)
            .map(|m| -w + 2.0 * w * m as f64 / (k2 - 1) as f64)
            .collect()
    };
    for v in lambda.iter_mut().chain(alpha.iter_mut()) {
        *v *= 1.0 + spec.jitter * rng.random_range(-1.0..=1.0);
    }
    // Quantiles of heavily tied data can coincide; nudge them apart.
    lambda.sort_by(f64::total_cmp);
    for j in 1..k1 {
        if lambda[j] <= lambda[j - 1] {
            lambda[j] = lambda[j - 1] * (1.0 + spec.jitter.max(1e-3));
        }
    }
    let g = MixingDistribution::new(lambda, vec![1.0 / k1 as f64; k1], Domain::Positive)?;
    let h = MixingDistribution::new(alpha, vec![1.0 / k2 as f64; k2], Domain::Unrestricted)?;
    ModelParams::new(beta, g, h)
}

/// Log-link Poisson regression by iteratively reweighted least squares.
///
/// An intercept is added unless the design already contains a constant column;
/// only the covariate coefficients are returned. `None` when the iteration does
/// not converge within [`IRLS_MAX_ITERATIONS`] or the weighted system is singular.
pub fn poisson_regression(data: &Dataset) -> Option<Vec<f64>> {
    let p = data.n_covariates();
    let has_constant = (0..p).any(|k| {
        let first = data.row(0)[k];
        first != 0.0 && data.rows().all(|row| row[k] == first)
    });
    let offset = usize::from(!has_constant);
    let d = p + offset;
    let design = |row: &[f64], k: usize| -> f64 {
        if offset == 1 {
            if k == 0 {
                1.0
            } else {
                row[k - 1]
            }
        } else {
            row[k]
        }
    };

    let y: Vec<f64> = data.y().iter().map(|&v| v as f64).collect();
    let mut mu: Vec<f64> = y.iter().map(|v| v + 0.5).collect();
    let mut eta: Vec<f64> = mu.iter().map(|m| m.ln()).collect();
    let mut coef = vec![0.0; d];
    let mut deviance = poisson_deviance(&y, &mu);

    for _ in 0..IRLS_MAX_ITERATIONS {
        let mut xtwx = vec![vec![0.0; d]; d];
        let mut xtwz = vec![0.0; d];
        for (i, row) in data.rows().enumerate() {
            let w = mu[i];
            let z = eta[i] + (y[i] - mu[i]) / mu[i];
            for a in 0..d {
                let xa = design(row, a);
                xtwz[a] += w * xa * z;
                for b in 0..=a {
                    xtwx[a][b] += w * xa * design(row, b);
                }
            }
        }
        for a in 0..d {
            for b in 0..a {
                xtwx[b][a] = xtwx[a][b];
            }
        }
        coef = solve(xtwx, xtwz)?;
        for (i, row) in data.rows().enumerate() {
            eta[i] = (0..d).map(|k| design(row, k) * coef[k]).sum();
            mu[i] = eta[i].exp();
        }
        if mu.iter().any(|m| !m.is_finite()) {
            return None;
        }
        let next = poisson_deviance(&y, &mu);
        let converged = (next - deviance).abs() / (next.abs() + 0.1) < IRLS_TOLERANCE;
        deviance = next;
        if converged {
            return Some(coef[offset..].to_vec());
        }
    }
    None
}

fn poisson_deviance(y: &[f64], mu: &[f64]) -> f64 {
    2.0 * y
        .iter()
        .zip(mu)
        .map(|(&y, &m)| {
            if y > 0.0 {
                y * (y / m).ln() - (y - m)
            } else {
                m
            }
        })
        .sum::<f64>()
}

/// Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    let scale = a.iter().flatten().fold(0.0f64, |s, v| s.max(v.abs()));
    for col in 0..n {
        let pivot = (col..n).max_by(|&r, &s| a[r][col].abs().total_cmp(&a[s][col].abs()))?;
        if a[pivot][col].abs() <= 1e-12 * scale.max(1e-300) {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    Some(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_design_recovers_log_mean_ratios() {
        // Control rows have an all-zero design row; group 1 has mean 5, control 20.
        let y = vec![18, 22, 20, 4, 6, 5];
        let rows = vec![
            vec![0.0],
            vec![0.0],
            vec![0.0],
            vec![1.0],
            vec![1.0],
            vec![1.0],
        ];
        let data = Dataset::new(y, rows).unwrap();
        let beta = poisson_regression(&data).unwrap();
        assert!((beta[0] - (5.0f64 / 20.0).ln()).abs() < 1e-8);
    }

    #[test]
    fn single_support_points() {
        let data = Dataset::new(vec![3, 4, 5], vec![vec![0.0], vec![1.0], vec![2.0]]).unwrap();
        let p = initialize(&data, 1, 1, 7, &InitSpec::default()).unwrap();
        assert_eq!(p.g.weights(), &[1.0]);
        assert_eq!(p.h.weights(), &[1.0]);
        assert_eq!(p.h.support(), &[0.0]);
    }

    #[test]
    fn deterministic_in_seed() {
        let data = Dataset::new(
            vec![3, 9, 5, 0, 12],
            vec![vec![0.0], vec![1.0], vec![2.0], vec![-1.0], vec![0.5]],
        )
        .unwrap();
        let a = initialize(&data, 3, 2, 11, &InitSpec::default()).unwrap();
        let b = initialize(&data, 3, 2, 11, &InitSpec::default()).unwrap();
        assert_eq!(a, b);
        let c = initialize(&data, 3, 2, 12, &InitSpec::default()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn all_zero_counts_fall_back() {
        let data = Dataset::new(vec![0, 0, 0], vec![vec![0.0], vec![1.0], vec![2.0]]).unwrap();
        let p = initialize(&data, 2, 2, 1, &InitSpec::default()).unwrap();
        assert!(p.beta[0].is_finite());
        assert!(p.g.support().iter().all(|&l| l > 0.0));
    }
}
