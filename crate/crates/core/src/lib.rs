//! Semiparametric regression for binomial counts whose sizes are unobserved.
//!
//! Each count `y_i` is modelled as Poisson with mean `λ p(α + x_i'β)`, where `p`
//! is the logistic function, `λ` follows a discrete distribution G on `(0, ∞)`
//! and `α` a discrete distribution H on the real line. β, G and H are estimated
//! jointly by an ECM algorithm; the numbers of support points are chosen by BIC
//! and β gets bootstrap confidence intervals.

pub mod bootstrap;
pub mod data;
pub mod ecm;
pub mod error;
pub mod math;
pub mod model;
pub mod optimize;
pub mod report;
pub mod selection;
pub mod simulation;

pub use data::{load_dataset, load_dataset_from_reader, DesignSpec};
pub use ecm::{fit, fit_best, fit_from, fit_multistart, FitConfig, FitResult};
pub use error::{Error, Result};
pub use model::{
    component_log_density, fitted_values, mixture_log_likelihood, Dataset, Domain,
    MixingDistribution, ModelParams,
};
pub use selection::{bic, forward_search, SelectionResult};
