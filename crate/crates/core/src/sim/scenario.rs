//! Super-population scenarios: Gaussian covariates, a linear-normal outcome
//! and a logistic selection mechanism for the non-probability sample.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::FinitePopulation;
use crate::error::{Error, Result};
use crate::linalg::{dot, logistic};

/// logit π_B as a function of (x, y).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SelectionModel {
    /// intercept + covariatesᵀx + outcome·y.
    Linear {
        intercept: f64,
        covariates: Vec<f64>,
        outcome: f64,
    },
    /// intercept + baseᵀx, plus (belowᵀx + below_outcome·y) when y < threshold
    /// and (aboveᵀx + above_outcome·y) otherwise.
    Piecewise {
        intercept: f64,
        base: Vec<f64>,
        threshold: f64,
        below: Vec<f64>,
        below_outcome: f64,
        above: Vec<f64>,
        above_outcome: f64,
    },
}

impl SelectionModel {
    pub fn logit(&self, x: &[f64], y: f64) -> f64 {
        match self {
            SelectionModel::Linear {
                intercept,
                covariates,
                outcome,
            } => intercept + dot(covariates, x) + outcome * y,
            SelectionModel::Piecewise {
                intercept,
                base,
                threshold,
                below,
                below_outcome,
                above,
                above_outcome,
            } => {
                let shared = intercept + dot(base, x);
                if y < *threshold {
                    shared + dot(below, x) + below_outcome * y
                } else {
                    shared + dot(above, x) + above_outcome * y
                }
            }
        }
    }

    pub fn probability(&self, x: &[f64], y: f64) -> f64 {
        logistic(self.logit(x, y))
    }

    fn covariate_lengths(&self) -> Vec<usize> {
        match self {
            SelectionModel::Linear { covariates, .. } => vec![covariates.len()],
            SelectionModel::Piecewise { base, below, above, .. } => vec![base.len(), below.len(), above.len()],
        }
    }
}

/// A data-generating process for one finite population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub name: String,
    pub population_size: usize,
    pub covariate_dim: usize,
    pub outcome_intercept: f64,
    pub outcome_coefficients: Vec<f64>,
    pub error_variance: f64,
    pub selection: SelectionModel,
}

impl ScenarioSpec {
    fn standard(name: &str, population_size: usize, selection: SelectionModel) -> Self {
        Self {
            name: name.into(),
            population_size,
            covariate_dim: 2,
            outcome_intercept: 0.0,
            outcome_coefficients: vec![1.0, 1.0],
            error_variance: 4.0,
            selection,
        }
    }

    /// MAR selection on x only.
    pub fn s1(population_size: usize) -> Self {
        Self::standard(
            "S1",
            population_size,
            SelectionModel::Linear {
                intercept: -0.5,
                covariates: vec![0.5, 0.5],
                outcome: 0.0,
            },
        )
    }

    /// MNAR selection, linear in y.
    pub fn s2(population_size: usize) -> Self {
        Self::standard(
            "S2",
            population_size,
            SelectionModel::Linear {
                intercept: -0.5,
                covariates: vec![0.5, 0.5],
                outcome: 0.2,
            },
        )
    }

    /// MNAR selection with a different form on each side of y = 0.
    pub fn s3(population_size: usize) -> Self {
        Self::standard(
            "S3",
            population_size,
            SelectionModel::Piecewise {
                intercept: -0.5,
                base: vec![0.5, 0.0],
                threshold: 0.0,
                below: vec![0.0, 0.5],
                below_outcome: 0.2,
                above: vec![0.0, 0.0],
                above_outcome: 0.3,
            },
        )
    }

    /// Looks up `S1`, `S2` or `S3`, ignoring case.
    pub fn named(name: &str, population_size: usize) -> Result<Self> {
        match name.to_ascii_uppercase().as_str() {
            "S1" => Ok(Self::s1(population_size)),
            "S2" => Ok(Self::s2(population_size)),
            "S3" => Ok(Self::s3(population_size)),
            _ => Err(Error::config("scenario", format!("unknown scenario `{name}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.population_size == 0 {
            return Err(Error::config("population_size", "must be at least 1"));
        }
        if self.covariate_dim == 0 {
            return Err(Error::config("covariate_dim", "must be at least 1"));
        }
        if self.outcome_coefficients.len() != self.covariate_dim {
            return Err(Error::config(
                "outcome_coefficients",
                format!("expected {} coefficients", self.covariate_dim),
            ));
        }
        if !(self.error_variance >= 0.0) {
            return Err(Error::config("error_variance", "must be non-negative"));
        }
        if self.selection.covariate_lengths().iter().any(|&l| l != self.covariate_dim) {
            return Err(Error::config(
                "selection",
                format!("covariate coefficient vectors must have length {}", self.covariate_dim),
            ));
        }
        Ok(())
    }
}

/// Draws covariates, outcomes and true selection probabilities.
pub fn generate_population<R: Rng + ?Sized>(spec: &ScenarioSpec, rng: &mut R) -> Result<FinitePopulation> {
    spec.validate()?;
    let n = spec.population_size;
    let p = spec.covariate_dim;
    let noise = Normal::new(0.0, spec.error_variance.sqrt())
        .map_err(|e| Error::config("error_variance", e.to_string()))?;
    let mut covariates = Vec::with_capacity(n * p);
    let mut outcomes = Vec::with_capacity(n);
    let mut probs = Vec::with_capacity(n);
    let mut x = vec![0.0; p];
    for _ in 0..n {
        for v in x.iter_mut() {
            *v = StandardNormal.sample(rng);
        }
        let y = spec.outcome_intercept + dot(&spec.outcome_coefficients, &x) + noise.sample(rng);
        probs.push(spec.selection.probability(&x, y));
        covariates.extend_from_slice(&x);
        outcomes.push(y);
    }
    let names = (1..=p).map(|j| format!("x{j}")).collect();
    FinitePopulation::new(covariates, names)?
        .with_outcomes(outcomes)?
        .with_selection_probs(probs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn selection_at_origin() {
        let expected = 0.377_540_668_798_145_4;
        for spec in [ScenarioSpec::s1(1), ScenarioSpec::s2(1), ScenarioSpec::s3(1)] {
            assert!((spec.selection.probability(&[0.0, 0.0], 0.0) - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn s3_switches_at_zero() {
        let s = ScenarioSpec::s3(1).selection;
        assert!((s.logit(&[1.0, 2.0], -1.0) - (-0.5 + 0.5 + 1.0 - 0.2)).abs() < 1e-15);
        assert!((s.logit(&[1.0, 2.0], 1.0) - (-0.5 + 0.5 + 0.3)).abs() < 1e-15);
    }

    #[test]
    fn outcome_variance_is_six() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pop = generate_population(&ScenarioSpec::s1(200_000), &mut rng).unwrap();
        let y = pop.outcomes().unwrap();
        let m = y.iter().sum::<f64>() / y.len() as f64;
        let v = y.iter().map(|v| (v - m).powi(2)).sum::<f64>() / y.len() as f64;
        assert!((v - 6.0).abs() < 0.1, "{v}");
    }

    #[test]
    fn unknown_scenario_names_the_field() {
        match ScenarioSpec::named("S9", 10) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "scenario"),
            other => panic!("{other:?}"),
        }
    }
}
