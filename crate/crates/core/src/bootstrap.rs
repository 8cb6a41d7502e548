//! Parametric and nonparametric bootstrap for β.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Poisson;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ecm::{fit_from, FitConfig, FitResult, StopReason};
use crate::error::{Error, Result};
use crate::math::{logistic, quantile_sorted, sample_sd};
use crate::model::{dot, Dataset, MixingDistribution};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Parametric,
    Nonparametric,
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "parametric" => Ok(Self::Parametric),
            "nonparametric" => Ok(Self::Nonparametric),
            other => Err(Error::InvalidInput(format!(
                "unknown bootstrap scheme '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub scheme: Scheme,
    /// Requested number of replicates.
    pub b: usize,
    /// One β̂* per usable replicate, in replicate order.
    pub replicates: Vec<Vec<f64>>,
    pub se: Vec<f64>,
    /// Percentile interval (2.5 %, 97.5 %) per coefficient.
    pub ci: Vec<(f64, f64)>,
    /// Replicates whose refit failed or lost a support point; excluded.
    pub failures: usize,
    /// Indices of the excluded replicates.
    pub failed_indices: Vec<usize>,
    /// Usable replicates that stopped at the iteration cap.
    pub unconverged: usize,
    /// More than a quarter of the replicates failed.
    pub unreliable: bool,
}

/// Seed of replicate `index`: the first word of the ChaCha8 stream `index`
/// keyed by `master`.
pub fn replicate_seed(master: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(index as u64);
    rng.next_u64()
}

/// Draws `y*` from the fitted model: λ_i from Ĝ, α_i from Ĥ, then a Poisson count.
pub fn parametric_resample(data: &Dataset, fit: &FitResult, seed: u64) -> Result<Dataset> {
    if fit.reason == StopReason::Degenerate {
        return Err(Error::InvalidInput(
            "cannot resample from a degenerate fit".into(),
        ));
    }
    let params = &fit.params;
    params.check_against(data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = categorical(&params.g)?;
    let h = categorical(&params.h)?;
    let y = data
        .rows()
        .map(|x| {
            let lambda = params.g.support()[g.sample(&mut rng)];
            let alpha = params.h.support()[h.sample(&mut rng)];
            poisson_draw(&mut rng, lambda * logistic(alpha + dot(x, &params.beta)))
        })
        .collect();
    Ok(data.with_responses(y))
}

/// Draws `r` rows with replacement.
pub fn nonparametric_resample(data: &Dataset, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = data.len();
    let idx: Vec<usize> = (0..r).map(|_| rng.random_range(0..r)).collect();
    data.select_rows(&idx)
}

fn categorical(d: &MixingDistribution) -> Result<WeightedIndex<f64>> {
    WeightedIndex::new(d.weights()).map_err(|e| Error::InvalidInput(format!("mixing weights: {e}")))
}

fn poisson_draw<R: Rng>(rng: &mut R, mean: f64) -> u64 {
    if !(mean > 0.0) {
        return 0;
    }
    let draw: f64 = Poisson::new(mean)
        .expect("positive finite mean")
        .sample(rng);
    draw as u64
}

/// Bootstrap with replicate `b` seeded by [`replicate_seed`]`(seed, b)`.
///
/// Each resample is refitted from the original estimate with the same support
/// sizes. Replicates run in parallel on the current rayon pool.
pub fn bootstrap_ci(
    data: &Dataset,
    fit: &FitResult,
    scheme: Scheme,
    b: usize,
    config: &FitConfig,
    seed: u64,
) -> Result<BootstrapResult> {
    let seeds: Vec<u64> = (0..b).map(|i| replicate_seed(seed, i)).collect();
    bootstrap_with_seeds(data, fit, scheme, &seeds, config)
}

/// [`bootstrap_ci`] with explicit per-replicate seeds.
pub fn bootstrap_with_seeds(
    data: &Dataset,
    fit: &FitResult,
    scheme: Scheme,
    seeds: &[u64],
    config: &FitConfig,
) -> Result<BootstrapResult> {
    let b = seeds.len();
    if b < 2 {
        return Err(Error::InvalidInput("the bootstrap needs B >= 2".into()));
    }
    config.validate()?;
    if fit.reason == StopReason::Degenerate {
        return Err(Error::InvalidInput(
            "cannot bootstrap a degenerate fit".into(),
        ));
    }
    fit.params.check_against(data)?;

    let outcomes: Vec<Option<FitResult>> = seeds
        .par_iter()
        .map(|&s| {
            let resample = match scheme {
                Scheme::Parametric => parametric_resample(data, fit, s).ok()?,
                Scheme::Nonparametric => nonparametric_resample(data, s),
            };
            let refit = fit_from(&resample, fit.params.clone(), config).ok()?;
            let same_k = refit.k1 == fit.k1 && refit.k2 == fit.k2;
            (refit.reason != StopReason::Degenerate && same_k).then_some(refit)
        })
        .collect();

    let mut replicates = Vec::new();
    let mut failed_indices = Vec::new();
    let mut unconverged = 0;
    for (i, o) in outcomes.into_iter().enumerate() {
        match o {
            Some(f) => {
                unconverged += usize::from(!f.converged);
                replicates.push(f.params.beta);
            }
            None => failed_indices.push(i),
        }
    }
    let (se, ci) = summarize(&replicates, fit.params.beta.len());
    Ok(BootstrapResult {
        scheme,
        b,
        failures: failed_indices.len(),
        unreliable: failed_indices.len() * 4 > b,
        failed_indices,
        unconverged,
        replicates,
        se,
        ci,
    })
}

/// Per-coordinate sample SD and type-7 percentile interval; NaN when fewer than two replicates.
fn summarize(replicates: &[Vec<f64>], dim: usize) -> (Vec<f64>, Vec<(f64, f64)>) {
    if replicates.len() < 2 {
        return (vec![f64::NAN; dim], vec![(f64::NAN, f64::NAN); dim]);
    }
    (0..dim)
        .map(|k| {
            let mut col: Vec<f64> = replicates.iter().map(|r| r[k]).collect();
            let sd = sample_sd(&col);
            col.sort_by(f64::total_cmp);
            (
                sd,
                (quantile_sorted(&col, 0.025), quantile_sorted(&col, 0.975)),
            )
        })
        .unzip()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ecm::fit;
    use crate::model::{Domain, ModelParams};

    fn toy() -> Dataset {
        let rows: Vec<Vec<f64>> = (0..30).map(|i| vec![(i % 5) as f64 - 2.0]).collect();
        let y = (0..30).map(|i| 20 + (i * 7 % 11) as u64).collect();
        Dataset::new(y, rows).unwrap()
    }

    #[test]
    fn replicate_seeds_differ_and_repeat() {
        assert_eq!(replicate_seed(5, 3), replicate_seed(5, 3));
        assert_ne!(replicate_seed(5, 3), replicate_seed(5, 4));
        assert_ne!(replicate_seed(5, 3), replicate_seed(6, 3));
    }

    #[test]
    fn single_row_resample_repeats_it() {
        let d = Dataset::new(vec![7], vec![vec![1.5]]).unwrap();
        let r = nonparametric_resample(&d, 1);
        assert_eq!(r.y(), &[7]);
        assert_eq!(r.row(0), &[1.5]);
    }

    #[test]
    fn parametric_resample_is_deterministic() {
        let d = toy();
        let f = fit(&d, 1, 1, &FitConfig::default()).unwrap();
        let a = parametric_resample(&d, &f, 9).unwrap();
        let b = parametric_resample(&d, &f, 9).unwrap();
        assert_eq!(a.y(), b.y());
        assert_eq!(a.row(3), d.row(3));
    }

    #[test]
    fn collided_seeds_give_zero_spread() {
        let d = toy();
        let f = fit(&d, 1, 1, &FitConfig::default()).unwrap();
        let res =
            bootstrap_with_seeds(&d, &f, Scheme::Parametric, &[11, 11], &FitConfig::default())
                .unwrap();
        assert_eq!(res.replicates.len(), 2);
        assert!(res.se.iter().all(|&s| s == 0.0));
        assert!(res.ci.iter().all(|(lo, hi)| lo == hi));
    }

    #[test]
    fn zero_mean_draws_are_zero() {
        let d = Dataset::new(vec![3, 5], vec![vec![0.0], vec![1.0]]).unwrap();
        let params = ModelParams::new(
            vec![-800.0],
            MixingDistribution::degenerate(5.0, Domain::Positive).unwrap(),
            MixingDistribution::degenerate(-800.0, Domain::Unrestricted).unwrap(),
        )
        .unwrap();
        let mut f = fit(&d, 1, 1, &FitConfig::default()).unwrap();
        f.params = params;
        assert_eq!(parametric_resample(&d, &f, 1).unwrap().y(), &[0, 0]);
    }

    #[test]
    fn b_below_two_is_rejected() {
        let d = toy();
        let f = fit(&d, 1, 1, &FitConfig::default()).unwrap();
        assert!(bootstrap_ci(&d, &f, Scheme::Parametric, 1, &FitConfig::default(), 0).is_err());
    }
}
