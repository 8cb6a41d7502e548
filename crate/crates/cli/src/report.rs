//! JSON shapes written by the command-line tool.

use binmix::bootstrap::{BootstrapResult, Scheme};
use binmix::ecm::StopReason;
use binmix::selection::GridCell;
use binmix::simulation::SettingSummary;
use binmix::{Dataset, FitConfig, FitResult, MixingDistribution, ModelParams};
use serde::Serialize;

#[derive(Debug, Serialize)]
pub struct Envelope<T: Serialize> {
    pub command: &'static str,
    pub seed: u64,
    pub config: FitConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelSpec>,
    pub result: T,
    /// Run-specific details excluded from reproducibility comparisons.
    pub metadata: Metadata,
}

#[derive(Debug, Serialize)]
pub struct Metadata {
    pub version: &'static str,
    pub unix_time: u64,
}

impl Metadata {
    pub fn now() -> Self {
        let unix_time = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Self {
            version: env!("CARGO_PKG_VERSION"),
            unix_time,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ModelSpec {
    pub input: String,
    pub input_sha256: String,
    pub response: String,
    pub factor: Option<String>,
    pub reference: Option<String>,
    pub covariates: Vec<String>,
    pub n_obs: usize,
    pub link: &'static str,
}

#[derive(Debug, Serialize)]
pub struct Coefficient {
    pub name: String,
    pub estimate: f64,
}

#[derive(Debug, Serialize)]
pub struct Mixing {
    pub support: Vec<f64>,
    pub weights: Vec<f64>,
}

impl From<&MixingDistribution> for Mixing {
    fn from(d: &MixingDistribution) -> Self {
        Self {
            support: d.support().to_vec(),
            weights: d.weights().to_vec(),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct Convergence {
    pub converged: bool,
    pub reason: StopReason,
    pub iterations: usize,
    pub ridge: bool,
    pub alpha_at_bound: bool,
    pub final_loglik_change: Option<f64>,
    pub final_param_change: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct FitReport {
    pub k_requested: (usize, usize),
    pub k: (usize, usize),
    pub coefficients: Vec<Coefficient>,
    pub g: Mixing,
    pub h: Mixing,
    pub loglik: f64,
    pub bic: f64,
    pub convergence: Convergence,
    /// Full parameter set; re-evaluating the likelihood here reproduces `loglik`.
    pub params: ModelParams,
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

impl FitReport {
    pub fn new(data: &Dataset, f: &FitResult) -> Self {
        Self {
            k_requested: f.requested_k,
            k: (f.k1, f.k2),
            coefficients: data
                .covariate_names()
                .iter()
                .zip(&f.params.beta)
                .map(|(name, &estimate)| Coefficient {
                    name: name.clone(),
                    estimate,
                })
                .collect(),
            g: (&f.params.g).into(),
            h: (&f.params.h).into(),
            loglik: f.loglik,
            bic: f.bic,
            convergence: Convergence {
                converged: f.converged,
                reason: f.reason,
                iterations: f.n_iterations,
                ridge: f.ridge,
                alpha_at_bound: f.alpha_at_bound,
                final_loglik_change: finite(f.final_loglik_change),
                final_param_change: finite(f.final_param_change),
            },
            params: f.params.clone(),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct SelectReport {
    pub k_max: usize,
    pub selected: (usize, usize),
    pub grid: Vec<GridCell>,
    pub fit: FitReport,
}

#[derive(Debug, Serialize)]
pub struct CoefficientInterval {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
}

#[derive(Debug, Serialize)]
pub struct BootstrapReport {
    pub scheme: Scheme,
    pub b: usize,
    pub failures: usize,
    pub unconverged: usize,
    pub unreliable: bool,
    pub table: Vec<CoefficientInterval>,
    pub fit: FitReport,
    pub replicates: Vec<Vec<f64>>,
}

impl BootstrapReport {
    pub fn new(data: &Dataset, f: &FitResult, boot: BootstrapResult) -> Self {
        let table = data
            .covariate_names()
            .iter()
            .enumerate()
            .map(|(k, name)| CoefficientInterval {
                name: name.clone(),
                estimate: f.params.beta[k],
                se: boot.se[k],
                ci_lower: boot.ci[k].0,
                ci_upper: boot.ci[k].1,
            })
            .collect();
        Self {
            scheme: boot.scheme,
            b: boot.b,
            failures: boot.failures,
            unconverged: boot.unconverged,
            unreliable: boot.unreliable,
            table,
            fit: FitReport::new(data, f),
            replicates: boot.replicates,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct SimulateReport {
    pub samples: usize,
    pub policy: binmix::simulation::FitPolicy,
    pub settings: Vec<SettingSummary>,
}

#[derive(Debug, Serialize)]
pub struct ErrorReport {
    pub error: ErrorBody,
}

#[derive(Debug, Serialize)]
pub struct ErrorBody {
    pub kind: &'static str,
    pub message: String,
}
