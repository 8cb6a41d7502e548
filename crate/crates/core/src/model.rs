//! The probability model: a Poisson count whose mean is `lambda * p(alpha + x'beta)`,
//! with `lambda` drawn from a discrete distribution G and `alpha` from a discrete
//! distribution H.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{ln_factorial, ln_logistic, log_sum_exp, logistic};

/// Tolerance on `Σ weights = 1`.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-10;

/// Weights below this are zeroed and their component dropped.
pub const WEIGHT_FLOOR: f64 = 1e-12;

/// Count responses with a dense row-major covariate matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: Vec<u64>,
    x: Vec<f64>,
    n_covariates: usize,
    covariate_names: Vec<String>,
    labels: Option<Vec<String>>,
    ln_fact: Vec<f64>,
}

impl Dataset {
    /// Builds a dataset from counts and covariate rows.
    pub fn new(y: Vec<u64>, rows: Vec<Vec<f64>>) -> Result<Self> {
        let width = rows.first().map(Vec::len).unwrap_or(0);
        let names = (1..=width).map(|j| format!("x{j}")).collect();
        Self::with_names(y, rows, names, None)
    }

    pub fn with_names(
        y: Vec<u64>,
        rows: Vec<Vec<f64>>,
        covariate_names: Vec<String>,
        labels: Option<Vec<String>>,
    ) -> Result<Self> {
        if y.is_empty() {
            return Err(Error::InvalidInput("dataset has no observations".into()));
        }
        if rows.len() != y.len() {
            return Err(Error::InvalidInput(format!(
                "{} responses but {} covariate rows",
                y.len(),
                rows.len()
            )));
        }
        let width = rows[0].len();
        if width == 0 {
            return Err(Error::InvalidInput(
                "at least one covariate column is required".into(),
            ));
        }
        if covariate_names.len() != width {
            return Err(Error::InvalidInput(format!(
                "{} covariate names for {width} columns",
                covariate_names.len()
            )));
        }
        let mut x = Vec::with_capacity(width * rows.len());
        for (i, row) in rows.iter().enumerate() {
            if row.len() != width {
                return Err(Error::InvalidInput(format!(
                    "row {i} has {} covariates, expected {width}",
                    row.len()
                )));
            }
            if let Some(v) = row.iter().find(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "row {i} has non-finite covariate {v}"
                )));
            }
            x.extend_from_slice(row);
        }
        if let Some(l) = &labels {
            if l.len() != y.len() {
                return Err(Error::InvalidInput(
                    "label count does not match row count".into(),
                ));
            }
        }
        let ln_fact = y.iter().map(|&v| ln_factorial(v)).collect();
        Ok(Self {
            y,
            x,
            n_covariates: width,
            covariate_names,
            labels,
            ln_fact,
        })
    }

    /// Number of observations `r`.
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Covariate dimension (the length of beta).
    pub fn n_covariates(&self) -> usize {
        self.n_covariates
    }

    pub fn y(&self) -> &[u64] {
        &self.y
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.n_covariates..(i + 1) * self.n_covariates]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.x.chunks_exact(self.n_covariates)
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }

    pub(crate) fn ln_factorial_at(&self, i: usize) -> f64 {
        self.ln_fact[i]
    }

    /// `x_i' beta` for every row.
    pub fn linear_predictor(&self, beta: &[f64]) -> Vec<f64> {
        debug_assert_eq!(beta.len(), self.n_covariates);
        self.rows().map(|row| dot(row, beta)).collect()
    }

    /// A new dataset with the same covariate layout and the given responses.
    pub fn with_responses(&self, y: Vec<u64>) -> Self {
        assert_eq!(y.len(), self.len());
        let ln_fact = y.iter().map(|&v| ln_factorial(v)).collect();
        Self {
            y,
            ln_fact,
            ..self.clone()
        }
    }

    /// A new dataset made of the given row indices (repeats allowed).
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let y = indices.iter().map(|&i| self.y[i]).collect();
        let x = indices
            .iter()
            .flat_map(|&i| self.row(i).iter().copied())
            .collect();
        let ln_fact = indices.iter().map(|&i| self.ln_fact[i]).collect();
        let labels = self
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i].clone()).collect());
        Self {
            y,
            x,
            n_covariates: self.n_covariates,
            covariate_names: self.covariate_names.clone(),
            labels,
            ln_fact,
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| u * v).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    /// Support points must be strictly positive (the size means of G).
    Positive,
    /// Any real support point (the intercepts of H).
    Unrestricted,
}

/// A finitely supported distribution stored in canonical form: support strictly
/// ascending, equal points merged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixingDistribution {
    support: Vec<f64>,
    weights: Vec<f64>,
    domain: Domain,
}

impl MixingDistribution {
    /// Validates and canonicalizes. Weights must be nonnegative and sum to one.
    pub fn new(support: Vec<f64>, weights: Vec<f64>, domain: Domain) -> Result<Self> {
        if support.is_empty() || support.len() != weights.len() {
            return Err(Error::InvalidInput(format!(
                "mixing distribution needs matching nonempty support/weights, got {} and {}",
                support.len(),
                weights.len()
            )));
        }
        if support.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidInput("non-finite support point".into()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidInput(
                "weights must be finite and nonnegative".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
            return Err(Error::InvalidInput(format!(
                "weights sum to {total}, not 1"
            )));
        }
        if domain == Domain::Positive && support.iter().any(|&s| s <= 0.0) {
            return Err(Error::InvalidInput(
                "positive-domain support point <= 0".into(),
            ));
        }
        Ok(Self::canonical(support, weights, domain))
    }

    /// One point with weight one.
    pub fn degenerate(point: f64, domain: Domain) -> Result<Self> {
        Self::new(vec![point], vec![1.0], domain)
    }

    /// Sorts, merges equal points and drops zero weights. Assumes already-valid entries.
    pub(crate) fn canonical(support: Vec<f64>, weights: Vec<f64>, domain: Domain) -> Self {
        let mut pairs: Vec<(f64, f64)> = support.into_iter().zip(weights).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut s: Vec<f64> = Vec::with_capacity(pairs.len());
        let mut w: Vec<f64> = Vec::with_capacity(pairs.len());
        for (p, q) in pairs {
            match s.last() {
                Some(&last) if last == p => *w.last_mut().unwrap() += q,
                _ => {
                    s.push(p);
                    w.push(q);
                }
            }
        }
        Self {
            support: s,
            weights: w,
            domain,
        }
    }

    pub fn support(&self) -> &[f64] {
        &self.support
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    /// Number of support points.
    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }

    pub fn mean(&self) -> f64 {
        dot(&self.support, &self.weights)
    }

    /// Checks the stored invariants (used after deserialization).
    pub fn validate(&self) -> Result<()> {
        let rebuilt = Self::new(self.support.clone(), self.weights.clone(), self.domain)?;
        if rebuilt.support != self.support {
            return Err(Error::InvalidInput(
                "support points are not strictly ascending".into(),
            ));
        }
        Ok(())
    }
}

/// beta together with the two mixing distributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub beta: Vec<f64>,
    pub g: MixingDistribution,
    pub h: MixingDistribution,
}

impl ModelParams {
    pub fn new(beta: Vec<f64>, g: MixingDistribution, h: MixingDistribution) -> Result<Self> {
        let p = Self { beta, g, h };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::InvalidInput(
                "beta has a non-finite coordinate".into(),
            ));
        }
        if self.g.domain != Domain::Positive || self.h.domain != Domain::Unrestricted {
            return Err(Error::InvalidInput(
                "G must be positive-domain and H unrestricted".into(),
            ));
        }
        self.g.validate()?;
        self.h.validate()
    }

    pub(crate) fn check_against(&self, data: &Dataset) -> Result<()> {
        if self.beta.len() != data.n_covariates() {
            return Err(Error::InvalidInput(format!(
                "beta has length {} but the design has {} columns",
                self.beta.len(),
                data.n_covariates()
            )));
        }
        Ok(())
    }

    pub fn k1(&self) -> usize {
        self.g.len()
    }

    pub fn k2(&self) -> usize {
        self.h.len()
    }
}

/// Log Poisson pmf at `y` with mean `lambda * p(t)`, using a precomputed `ln(y!)`.
#[inline]
pub(crate) fn ln_component(y: u64, ln_fact: f64, lambda: f64, t: f64) -> f64 {
    let mu = lambda * logistic(t);
    if y == 0 {
        -mu
    } else {
        -mu + y as f64 * (lambda.ln() + ln_logistic(t)) - ln_fact
    }
}

/// Log density of a single component: Poisson with mean `lambda * p(alpha + x'beta)`.
pub fn component_log_density(
    y: u64,
    x: &[f64],
    beta: &[f64],
    lambda: f64,
    alpha: f64,
) -> Result<f64> {
    if !(lambda > 0.0) {
        return Err(Error::InvalidInput(format!(
            "lambda must be positive, got {lambda}"
        )));
    }
    if x.len() != beta.len() {
        return Err(Error::InvalidInput(
            "covariate row and beta differ in length".into(),
        ));
    }
    Ok(ln_component(
        y,
        ln_factorial(y),
        lambda,
        alpha + dot(x, beta),
    ))
}

/// Joint log weight + log density for every (j, m) at observation `i`, written
/// into `out` in row-major (j, m) order.
pub(crate) fn joint_log_terms(
    data: &Dataset,
    i: usize,
    eta_i: f64,
    params: &ModelParams,
    ln_rho: &[f64],
    ln_pi: &[f64],
    out: &mut [f64],
) {
    let y = data.y()[i];
    let lf = data.ln_factorial_at(i);
    let k2 = params.h.len();
    for (j, &lambda) in params.g.support().iter().enumerate() {
        for (m, &alpha) in params.h.support().iter().enumerate() {
            out[j * k2 + m] = ln_rho[j] + ln_pi[m] + ln_component(y, lf, lambda, alpha + eta_i);
        }
    }
}

/// Observed-data log-likelihood `Σ_i ln Σ_j Σ_m ρ_j π_m f(y_i; λ_j, α_m)`.
pub fn mixture_log_likelihood(data: &Dataset, params: &ModelParams) -> Result<f64> {
    params.check_against(data)?;
    let eta = data.linear_predictor(&params.beta);
    let ln_rho: Vec<f64> = params.g.weights().iter().map(|w| w.ln()).collect();
    let ln_pi: Vec<f64> = params.h.weights().iter().map(|w| w.ln()).collect();
    let mut buf = vec![0.0; params.k1() * params.k2()];
    let mut total = 0.0;
    for i in 0..data.len() {
        joint_log_terms(data, i, eta[i], params, &ln_rho, &ln_pi, &mut buf);
        let li = log_sum_exp(&buf);
        if !li.is_finite() {
            return Err(Error::DegenerateLikelihood { row: i });
        }
        total += li;
    }
    Ok(total)
}

/// Model mean of each `y_i`: `Σ_j Σ_m ρ_j π_m λ_j p(α_m + x_i'β)`.
pub fn fitted_values(data: &Dataset, params: &ModelParams) -> Vec<f64> {
    let g_mean = params.g.mean();
    data.linear_predictor(&params.beta)
        .into_iter()
        .map(|eta| {
            let mean_p: f64 = params
                .h
                .support()
                .iter()
                .zip(params.h.weights())
                .map(|(a, w)| w * logistic(a + eta))
                .sum();
            g_mean * mean_p
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(s: &[f64], w: &[f64]) -> MixingDistribution {
        MixingDistribution::new(s.to_vec(), w.to_vec(), Domain::Positive).unwrap()
    }

    fn h(s: &[f64], w: &[f64]) -> MixingDistribution {
        MixingDistribution::new(s.to_vec(), w.to_vec(), Domain::Unrestricted).unwrap()
    }

    #[test]
    fn poisson_one_at_zero() {
        // lambda = 2, alpha = 0 gives mu = 1.
        let v = component_log_density(0, &[0.0], &[0.0], 2.0, 0.0).unwrap();
        assert!((v + 1.0).abs() < 1e-15);
    }

    #[test]
    fn poisson_mean_five_at_three() {
        let v = component_log_density(3, &[0.0], &[0.0], 10.0, 0.0).unwrap();
        let naive = (-5.0f64).exp() * 5f64.powi(3) / 6.0;
        assert!((v - naive.ln()).abs() < 1e-13);
        assert!((v - (-5.0 + 3.0 * 5f64.ln() - 6f64.ln())).abs() < 1e-13);
    }

    #[test]
    fn large_count_stays_finite() {
        // mu = 170 via lambda = 340, p = 0.5.
        let v = component_log_density(170, &[0.0], &[0.0], 340.0, 0.0).unwrap();
        // Stirling with the 1/(12n) correction for ln(170!).
        let n = 170f64;
        let stirling =
            n * n.ln() - n + 0.5 * (2.0 * std::f64::consts::PI * n).ln() + 1.0 / (12.0 * n)
                - 1.0 / (360.0 * n.powi(3));
        let oracle = -n + n * n.ln() - stirling;
        assert!(v.is_finite());
        assert!((v - oracle).abs() < 1e-10, "{v} vs {oracle}");
    }

    #[test]
    fn zero_count_with_underflowing_mean() {
        let v = component_log_density(0, &[1.0], &[-800.0], 5.0, 0.0).unwrap();
        assert_eq!(v, -0.0 * 1.0 - 5.0 * logistic(-800.0));
        assert!(v.is_finite());
    }

    #[test]
    fn rejects_nonpositive_lambda() {
        assert!(component_log_density(1, &[0.0], &[0.0], 0.0, 0.0).is_err());
        assert!(component_log_density(1, &[0.0], &[0.0], -1.0, 0.0).is_err());
    }

    #[test]
    fn canonical_ordering_merges_duplicates() {
        let d = g(&[5.0, 1.0, 5.0], &[0.25, 0.5, 0.25]);
        assert_eq!(d.support(), &[1.0, 5.0]);
        assert_eq!(d.weights(), &[0.5, 0.5]);
    }

    #[test]
    fn mixing_distribution_rejects_bad_input() {
        assert!(MixingDistribution::new(vec![1.0], vec![0.9], Domain::Positive).is_err());
        assert!(MixingDistribution::new(vec![-1.0], vec![1.0], Domain::Positive).is_err());
        assert!(MixingDistribution::new(vec![-1.0], vec![1.0], Domain::Unrestricted).is_ok());
        assert!(
            MixingDistribution::new(vec![1.0, 2.0], vec![1.2, -0.2], Domain::Unrestricted).is_err()
        );
        assert!(MixingDistribution::new(vec![], vec![], Domain::Unrestricted).is_err());
    }

    #[test]
    fn single_component_likelihood_collapses() {
        let data = Dataset::new(vec![0, 4, 9], vec![vec![0.5], vec![-1.0], vec![2.0]]).unwrap();
        let params = ModelParams::new(vec![0.3], g(&[12.0], &[1.0]), h(&[-0.4], &[1.0])).unwrap();
        let ll = mixture_log_likelihood(&data, &params).unwrap();
        let direct: f64 = (0..3)
            .map(|i| component_log_density(data.y()[i], data.row(i), &[0.3], 12.0, -0.4).unwrap())
            .sum();
        assert!((ll - direct).abs() < 1e-12);
    }

    #[test]
    fn weight_splitting_leaves_likelihood_unchanged() {
        let data = Dataset::new(vec![3, 7, 1], vec![vec![0.1], vec![-0.6], vec![1.3]]).unwrap();
        let base = ModelParams::new(
            vec![0.8],
            g(&[6.0, 20.0], &[0.3, 0.7]),
            h(&[-1.0, 0.5], &[0.6, 0.4]),
        )
        .unwrap();
        // Build a split G without canonical merging so the duplicate survives.
        let split = ModelParams {
            g: MixingDistribution {
                support: vec![6.0, 6.0, 20.0],
                weights: vec![0.15, 0.15, 0.7],
                domain: Domain::Positive,
            },
            ..base.clone()
        };
        let a = mixture_log_likelihood(&data, &base).unwrap();
        let b = mixture_log_likelihood(&data, &split).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn fitted_values_constant_case() {
        let data = Dataset::new(vec![1, 2], vec![vec![0.0], vec![0.0]]).unwrap();
        let params = ModelParams::new(vec![1.0], g(&[10.0], &[1.0]), h(&[0.0], &[1.0])).unwrap();
        for v in fitted_values(&data, &params) {
            assert!((v - 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dataset_validation() {
        assert!(Dataset::new(vec![], vec![]).is_err());
        assert!(Dataset::new(vec![1, 2], vec![vec![0.0], vec![0.0, 1.0]]).is_err());
        assert!(Dataset::new(vec![1], vec![vec![f64::NAN]]).is_err());
        assert!(Dataset::new(vec![1], vec![vec![]]).is_err());
    }

    #[test]
    fn degenerate_likelihood_is_an_error() {
        let data = Dataset::new(vec![1], vec![vec![0.0]]).unwrap();
        let params = ModelParams {
            beta: vec![0.0],
            g: MixingDistribution {
                support: vec![1.0],
                weights: vec![0.0],
                domain: Domain::Positive,
            },
            h: h(&[0.0], &[1.0]),
        };
        assert!(matches!(
            mixture_log_likelihood(&data, &params),
            Err(Error::DegenerateLikelihood { row: 0 })
        ));
    }
}
