//! Multiply bias-calibrated empirical likelihood for combining a probability
//! sample, a non-probability sample and full-population covariates.

pub mod baselines;
pub mod data;
pub mod density;
pub mod el;
pub mod error;
pub mod io;
pub mod linalg;
pub mod propensity;
pub mod sim;
pub mod variance;

pub use data::{
    population_mean, validate_sample_against_population, Design, Diagnostic, EstimateWithSE, FinitePopulation,
    NonProbabilitySample, ProbabilitySample, StratumDesign,
};
pub use density::{fit_outcome_density, smoothed_propensity, smoothed_propensity_population_mean, DensityFamily, OutcomeDensityFit};
pub use el::{el_dual_solve, estimate_el0, estimate_elk, estimate_mel, CalibrationSetup, CalibrationSystem, ConstraintLabel, ELSolution, MelEstimate};
pub use error::{Error, ErrorCategory, Result};
pub use propensity::{predict_pi, solve_candidate_propensity, FittedPropensity, PropensityModelSpec, Term};

/// Library version recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
