//! Choosing the numbers of support points (K₁, K₂) by BIC with a forward search.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::ecm::{fit_multistart, FitConfig, FitResult, StopReason};
use crate::error::{Error, Result};
use crate::model::{Dataset, Domain, MixingDistribution, ModelParams};

/// Default cap on K₁ and K₂.
pub const DEFAULT_K_MAX: usize = 6;

/// Relative offset used when splitting a support point for a warm start.
const SPLIT_FRACTION: f64 = 0.1;

/// `-2 loglik + ln(r) (2 (k1 + k2) - 2 + p)`.
pub fn bic(loglik: f64, k1: usize, k2: usize, r: usize, p_dim: usize) -> f64 {
    let n_params = 2 * (k1 + k2) - 2 + p_dim;
    -2.0 * loglik + (r as f64).ln() * n_params as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub k1: usize,
    pub k2: usize,
    /// `+inf` when the fit failed.
    #[serde(with = "crate::report::float_or_null")]
    pub bic: f64,
    #[serde(with = "crate::report::float_or_null")]
    pub loglik: f64,
    /// Support sizes after component drops; the BIC is computed with these.
    pub effective_k: (usize, usize),
    pub n_iterations: usize,
    pub converged: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    /// Visited cells in visiting order.
    pub grid: Vec<GridCell>,
    pub selected: (usize, usize),
    pub selected_fit: FitResult,
}

impl SelectionResult {
    pub fn cell(&self, k1: usize, k2: usize) -> Option<&GridCell> {
        self.grid.iter().find(|c| c.k1 == k1 && c.k2 == k2)
    }
}

/// Forward search over (K₁, K₂).
///
/// Rows K₁ = 1, 2, … are visited in order. Within a row K₂ grows while the BIC
/// keeps decreasing (the first non-decreasing cell is still fitted). The search
/// stops adding rows once the best BIC of a row has been higher than the previous
/// row's best for two consecutive rows, or at `k_max`. Each cell except (1, 1)
/// is warm-started from its better already-fitted neighbour (K₁−1, K₂) or
/// (K₁, K₂−1) with the heaviest support point of the grown distribution split.
pub fn forward_search(data: &Dataset, config: &FitConfig, k_max: usize) -> Result<SelectionResult> {
    if k_max == 0 {
        return Err(Error::InvalidInput("k_max must be at least 1".into()));
    }
    config.validate()?;
    let mut fits: BTreeMap<(usize, usize), FitResult> = BTreeMap::new();
    let mut grid = Vec::new();
    let mut previous_row_best: Option<f64> = None;
    let mut increases = 0;

    for k1 in 1..=k_max {
        let mut prev_bic = f64::INFINITY;
        let mut row_best = f64::INFINITY;
        for k2 in 1..=k_max {
            let outcome = fit_cell(data, config, k1, k2, &fits);
            let cell = match &outcome {
                Ok(f) => GridCell {
                    k1,
                    k2,
                    bic: f.bic,
                    loglik: f.loglik,
                    effective_k: (f.k1, f.k2),
                    n_iterations: f.n_iterations,
                    converged: f.converged,
                    error: None,
                },
                Err(e) => GridCell {
                    k1,
                    k2,
                    bic: f64::INFINITY,
                    loglik: f64::NEG_INFINITY,
                    effective_k: (k1, k2),
                    n_iterations: 0,
                    converged: false,
                    error: Some(e.to_string()),
                },
            };
            let cell_bic = cell.bic;
            grid.push(cell);
            if let Ok(f) = outcome {
                fits.insert((k1, k2), f);
            }
            row_best = row_best.min(cell_bic);
            if !(cell_bic < prev_bic) {
                break;
            }
            prev_bic = cell_bic;
        }
        if let Some(prev) = previous_row_best {
            if row_best > prev {
                increases += 1;
            } else {
                increases = 0;
            }
        }
        if increases >= 2 {
            break;
        }
        previous_row_best = Some(row_best);
    }

    let best = grid
        .iter()
        .filter(|c| c.bic.is_finite())
        .min_by(|a, b| {
            a.bic
                .total_cmp(&b.bic)
                .then((a.k1 + a.k2).cmp(&(b.k1 + b.k2)))
                .then(a.k1.cmp(&b.k1))
        })
        .ok_or_else(|| Error::InvalidInput("every grid cell failed to fit".into()))?;
    let selected = (best.k1, best.k2);
    let selected_fit = fits.remove(&selected).expect("successful cell has a fit");
    Ok(SelectionResult {
        grid,
        selected,
        selected_fit,
    })
}

fn fit_cell(
    data: &Dataset,
    config: &FitConfig,
    k1: usize,
    k2: usize,
    fits: &BTreeMap<(usize, usize), FitResult>,
) -> Result<FitResult> {
    let neighbours = [(k1.wrapping_sub(1), k2), (k1, k2.wrapping_sub(1))];
    let mut bases: Vec<&FitResult> = neighbours
        .iter()
        .filter_map(|key| fits.get(key))
        .filter(|f| f.reason != StopReason::Degenerate)
        .collect();
    bases.sort_by(|a, b| a.bic.total_cmp(&b.bic));
    let warm: Vec<ModelParams> = bases
        .iter()
        .flat_map(|f| grow_variants(&f.params, k1, k2))
        .collect();
    let anchor = fits.get(&(1, 1)).map(|f| &f.params);
    fit_multistart(data, k1, k2, warm, anchor, config)
}

/// Warm starts from a smaller fit: the heaviest-point split first, then a
/// split of each other support point of the distribution that has to grow.
pub fn grow_variants(params: &ModelParams, k1: usize, k2: usize) -> Vec<ModelParams> {
    let mut out = vec![grow(params, k1, k2)];
    let single_step_g = params.g.len() + 1 == k1 && params.h.len() == k2;
    let single_step_h = params.h.len() + 1 == k2 && params.g.len() == k1;
    if single_step_g {
        let heaviest = heaviest_index(&params.g);
        for idx in (0..params.g.len()).filter(|&i| i != heaviest) {
            out.push(ModelParams {
                g: split_at(&params.g, idx),
                ..params.clone()
            });
        }
    }
    if single_step_h {
        let heaviest = heaviest_index(&params.h);
        for idx in (0..params.h.len()).filter(|&i| i != heaviest) {
            out.push(ModelParams {
                h: split_at(&params.h, idx),
                ..params.clone()
            });
        }
    }
    out
}

/// Splits the heaviest support points until G has `k1` and H has `k2` points.
pub fn grow(params: &ModelParams, k1: usize, k2: usize) -> ModelParams {
    let mut g = params.g.clone();
    while g.len() < k1 {
        g = split_heaviest(&g);
    }
    let mut h = params.h.clone();
    while h.len() < k2 {
        h = split_heaviest(&h);
    }
    ModelParams {
        beta: params.beta.clone(),
        g,
        h,
    }
}

fn heaviest_index(d: &MixingDistribution) -> usize {
    // First index among equal maxima.
    let mut best = 0;
    for (i, w) in d.weights().iter().enumerate() {
        if *w > d.weights()[best] {
            best = i;
        }
    }
    best
}

fn split_heaviest(d: &MixingDistribution) -> MixingDistribution {
    split_at(d, heaviest_index(d))
}

fn split_at(d: &MixingDistribution, idx: usize) -> MixingDistribution {
    let point = d.support()[idx];
    let offset = match d.domain() {
        Domain::Positive => SPLIT_FRACTION * point,
        // α near zero would barely move under a purely relative split.
        Domain::Unrestricted => SPLIT_FRACTION * point.abs().max(1.0),
    };
    let mut support = d.support().to_vec();
    let mut weights = d.weights().to_vec();
    let w = weights[idx] / 2.0;
    support[idx] = point - offset;
    weights[idx] = w;
    support.push(point + offset);
    weights.push(w);
    MixingDistribution::canonical(support, weights, d.domain())
}
