//! Monte Carlo study over the 2³ design of β, G and H.

use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bootstrap::replicate_seed;
use crate::ecm::{fit_best, FitConfig, FitResult, StopReason};
use crate::error::{Error, Result};
use crate::math::{logistic, quantile_sorted, sample_sd};
use crate::model::{Dataset, Domain, MixingDistribution};
use crate::selection::forward_search;

/// The two values of each design factor plus the covariate grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationDesign {
    pub betas: [f64; 2],
    pub g: [MixingDistribution; 2],
    pub h: [MixingDistribution; 2],
    /// Covariate values; each gets `replicates` draws.
    pub x: Vec<f64>,
    pub replicates: usize,
}

impl Default for SimulationDesign {
    fn default() -> Self {
        let pos = |s: Vec<f64>, w: Vec<f64>| {
            MixingDistribution::new(s, w, Domain::Positive).expect("valid G")
        };
        let real = |s: Vec<f64>, w: Vec<f64>| {
            MixingDistribution::new(s, w, Domain::Unrestricted).expect("valid H")
        };
        Self {
            betas: [-2.0, 3.0],
            g: [
                pos(vec![100.0, 200.0, 300.0], vec![0.1, 0.8, 0.1]),
                pos(vec![10.0, 50.0], vec![0.5, 0.5]),
            ],
            h: [
                real(vec![-2.0, 0.4, 3.0], vec![0.3, 0.3, 0.4]),
                real(vec![-2.0, 1.5], vec![0.25, 0.75]),
            ],
            x: (-5..=5).map(f64::from).collect(),
            replicates: 10,
        }
    }
}

/// One cell of the design, numbered 1–8 with H varying fastest, then G, then β.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Setting {
    pub id: usize,
    pub beta: f64,
    pub g: MixingDistribution,
    pub h: MixingDistribution,
    /// "G1"/"G2" and "H1"/"H2".
    pub g_label: String,
    pub h_label: String,
    pub x: Vec<f64>,
    pub replicates: usize,
}

impl SimulationDesign {
    pub const N_SETTINGS: usize = 8;

    pub fn setting(&self, id: usize) -> Result<Setting> {
        if !(1..=Self::N_SETTINGS).contains(&id) {
            return Err(Error::InvalidInput(format!(
                "setting must be in 1..=8, got {id}"
            )));
        }
        let k = id - 1;
        let (bi, gi, hi) = (k / 4, (k / 2) % 2, k % 2);
        Ok(Setting {
            id,
            beta: self.betas[bi],
            g: self.g[gi].clone(),
            h: self.h[hi].clone(),
            g_label: format!("G{}", gi + 1),
            h_label: format!("H{}", hi + 1),
            x: self.x.clone(),
            replicates: self.replicates,
        })
    }
}

/// Draws one dataset: for each x in order, `replicates` independent triples
/// (λ ~ G, α ~ H, y ~ Poisson(λ p(α + xβ))).
pub fn generate_sample(setting: &Setting, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = rand::distr::weighted::WeightedIndex::new(setting.g.weights())
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    let h = rand::distr::weighted::WeightedIndex::new(setting.h.weights())
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    let mut y = Vec::with_capacity(setting.x.len() * setting.replicates);
    let mut rows = Vec::with_capacity(y.capacity());
    for &x in &setting.x {
        for _ in 0..setting.replicates {
            let lambda = setting.g.support()[g.sample(&mut rng)];
            let alpha = setting.h.support()[h.sample(&mut rng)];
            let mean = lambda * logistic(alpha + x * setting.beta);
            let draw = if mean > 0.0 {
                rand_distr::Poisson::new(mean)
                    .expect("positive mean")
                    .sample(&mut rng) as u64
            } else {
                0
            };
            y.push(draw);
            rows.push(vec![x]);
        }
    }
    Dataset::with_names(y, rows, vec!["x".into()], None)
}

/// How (K₁, K₂) is chosen when fitting simulated data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitPolicy {
    /// Support sizes of the generating G and H, fitted with [`fit_best`].
    TrueK,
    /// BIC forward search up to `k_max`.
    Select { k_max: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettingSummary {
    pub setting: usize,
    pub beta: f64,
    pub g: String,
    pub h: String,
    pub n_samples: usize,
    pub bias: f64,
    pub sd: f64,
    pub mse: f64,
    /// Empirical 2.5 % and 97.5 % quantiles of β̂ over the samples.
    pub qi: (f64, f64),
    /// Samples whose fit failed; excluded from the summary.
    pub failures: usize,
    /// Used samples that stopped at the iteration cap.
    pub unconverged: usize,
    /// More than 10 % of the samples failed.
    pub flagged: bool,
    /// β̂ per used sample, in sample order.
    pub estimates: Vec<f64>,
}

/// Seed of sample `sample` in setting `setting`.
pub fn sample_seed(master: u64, setting: usize, sample: usize) -> u64 {
    replicate_seed(master, (setting << 32) | sample)
}

/// Runs `n_samples` fits for every listed setting and summarizes β̂.
/// Samples run in parallel on the current rayon pool.
pub fn run_design(
    design: &SimulationDesign,
    settings: &[usize],
    n_samples: usize,
    config: &FitConfig,
    master_seed: u64,
    policy: FitPolicy,
) -> Result<Vec<SettingSummary>> {
    if n_samples < 2 {
        return Err(Error::InvalidInput("n_samples must be at least 2".into()));
    }
    config.validate()?;
    let cells: Vec<Setting> = settings
        .iter()
        .map(|&id| design.setting(id))
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, usize)> = (0..cells.len())
        .flat_map(|c| (0..n_samples).map(move |s| (c, s)))
        .collect();
    let outcomes: Vec<Option<FitResult>> = jobs
        .par_iter()
        .map(|&(c, s)| {
            let cell = &cells[c];
            let data = generate_sample(cell, sample_seed(master_seed, cell.id, s)).ok()?;
            let fitted = match policy {
                FitPolicy::TrueK => fit_best(&data, cell.g.len(), cell.h.len(), config).ok()?,
                FitPolicy::Select { k_max } => {
                    forward_search(&data, config, k_max).ok()?.selected_fit
                }
            };
            (fitted.reason != StopReason::Degenerate).then_some(fitted)
        })
        .collect();

    Ok(cells
        .iter()
        .zip(outcomes.chunks(n_samples))
        .map(|(cell, chunk)| summarize(cell, chunk))
        .collect())
}

fn summarize(cell: &Setting, fits: &[Option<FitResult>]) -> SettingSummary {
    let estimates: Vec<f64> = fits.iter().flatten().map(|f| f.params.beta[0]).collect();
    let failures = fits.len() - estimates.len();
    let unconverged = fits.iter().flatten().filter(|f| !f.converged).count();
    let n = estimates.len();
    let (bias, sd, mse, qi) = if n == 0 {
        (f64::NAN, f64::NAN, f64::NAN, (f64::NAN, f64::NAN))
    } else {
        let mean = estimates.iter().sum::<f64>() / n as f64;
        let mse = estimates
            .iter()
            .map(|b| (b - cell.beta).powi(2))
            .sum::<f64>()
            / n as f64;
        let sd = if n > 1 { sample_sd(&estimates) } else { 0.0 };
        let mut sorted = estimates.clone();
        sorted.sort_by(f64::total_cmp);
        (
            mean - cell.beta,
            sd,
            mse,
            (
                quantile_sorted(&sorted, 0.025),
                quantile_sorted(&sorted, 0.975),
            ),
        )
    };
    SettingSummary {
        setting: cell.id,
        beta: cell.beta,
        g: cell.g_label.clone(),
        h: cell.h_label.clone(),
        n_samples: fits.len(),
        bias,
        sd,
        mse,
        qi,
        failures,
        unconverged,
        flagged: failures * 10 > fits.len(),
        estimates,
    }
}

/// CSV with columns setting, beta, G, H, bias, sd, qi_lower, qi_upper, mse, failures.
pub fn summaries_to_csv(summaries: &[SettingSummary]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "setting", "beta", "G", "H", "bias", "sd", "qi_lower", "qi_upper", "mse", "failures",
    ])?;
    for s in summaries {
        w.write_record([
            s.setting.to_string(),
            s.beta.to_string(),
            s.g.clone(),
            s.h.clone(),
            format!("{:.6}", s.bias),
            format!("{:.6}", s.sd),
            format!("{:.6}", s.qi.0),
            format!("{:.6}", s.qi.1),
            format!("{:.6}", s.mse),
            s.failures.to_string(),
        ])?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Fixed-width text table with the same columns as [`summaries_to_csv`].
pub fn summaries_table(summaries: &[SettingSummary]) -> String {
    let mut out = format!(
        "{:>7} {:>5} {:>3} {:>3} {:>8} {:>7} {:>18} {:>7}\n",
        "setting", "beta", "G", "H", "bias", "sd", "qi", "mse"
    );
    for s in summaries {
        let qi = format!("({:.2}, {:.2})", s.qi.0, s.qi.1);
        out.push_str(&format!(
            "{:>7} {:>5} {:>3} {:>3} {:>8.3} {:>7.3} {:>18} {:>7.3}{}\n",
            s.setting,
            s.beta,
            s.g,
            s.h,
            s.bias,
            s.sd,
            qi,
            s.mse,
            if s.flagged { "  (flagged)" } else { "" }
        ));
    }
    out
}
