//! Consistent variable selection on multiply-imputed regression data.
//!
//! Five Bayesian MI-LASSO models (Multi-Laplace, Horseshoe, ARD,
//! Spike-Normal, Spike-Laplace) fitted by Gibbs sampling over all imputed
//! datasets at once, a frequentist MI-LASSO baseline, selection rules,
//! a MICE imputer, a simulation harness and a small Bayesian optimizer for
//! hyperparameter tuning.

pub mod baseline;
pub mod cli;
pub mod data;
pub mod error;
pub mod hyperopt;
pub mod imputation;
pub mod linalg;
pub mod models;
pub mod report;
pub mod rng;
pub mod sampler;
pub mod selection;
pub mod simulation;

pub use error::{Error, Result};
