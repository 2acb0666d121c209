//! Finite population, probability sample and non-probability sample.
//!
//! Units are addressed by their zero-based row in the population; file
//! formats use one-based indices and convert on the way in and out.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Full-population covariates plus optional simulation truth.
#[derive(Debug, Clone, PartialEq)]
pub struct FinitePopulation {
    covariates: Vec<f64>,
    ncols: usize,
    covariate_names: Vec<String>,
    outcomes: Option<Vec<f64>>,
    selection_probs_true: Option<Vec<f64>>,
    strata: Option<Vec<i64>>,
    domains: Option<Vec<i64>>,
}

impl FinitePopulation {
    /// Builds a population from row-major covariates.
    pub fn new(covariates: Vec<f64>, covariate_names: Vec<String>) -> Result<Self> {
        let ncols = covariate_names.len();
        if ncols == 0 {
            return Err(Error::Precondition("population needs at least one covariate".into()));
        }
        if covariates.is_empty() || !covariates.len().is_multiple_of(ncols) {
            return Err(Error::Precondition(format!(
                "covariate buffer of length {} is not a non-empty multiple of {ncols}",
                covariates.len()
            )));
        }
        if let Some(pos) = covariates.iter().position(|v| !v.is_finite()) {
            return Err(Error::Precondition(format!(
                "non-finite covariate at row {}",
                pos / ncols
            )));
        }
        Ok(Self {
            covariates,
            ncols,
            covariate_names,
            outcomes: None,
            selection_probs_true: None,
            strata: None,
            domains: None,
        })
    }

    /// Convenience constructor from rows, naming covariates `x1..xp`.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let p = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != p) {
            return Err(Error::Precondition("ragged covariate rows".into()));
        }
        let names = (1..=p).map(|j| format!("x{j}")).collect();
        Self::new(rows.concat(), names)
    }

    pub fn with_outcomes(mut self, outcomes: Vec<f64>) -> Result<Self> {
        self.check_len("outcomes", outcomes.len())?;
        if outcomes.iter().any(|y| !y.is_finite()) {
            return Err(Error::Precondition("non-finite outcome".into()));
        }
        self.outcomes = Some(outcomes);
        Ok(self)
    }

    pub fn with_selection_probs(mut self, probs: Vec<f64>) -> Result<Self> {
        self.check_len("selection probabilities", probs.len())?;
        if probs.iter().any(|p| !(*p > 0.0 && *p < 1.0)) {
            return Err(Error::Precondition(
                "true selection probabilities must lie strictly in (0, 1)".into(),
            ));
        }
        self.selection_probs_true = Some(probs);
        Ok(self)
    }

    /// Attaches true selection probabilities without the open-interval check.
    ///
    /// Used by degenerate simulation mechanisms (probability exactly 0 or 1).
    pub fn with_selection_probs_unchecked(mut self, probs: Vec<f64>) -> Result<Self> {
        self.check_len("selection probabilities", probs.len())?;
        self.selection_probs_true = Some(probs);
        Ok(self)
    }

    pub fn with_strata(mut self, strata: Vec<i64>) -> Result<Self> {
        self.check_len("strata", strata.len())?;
        self.strata = Some(strata);
        Ok(self)
    }

    pub fn with_domains(mut self, domains: Vec<i64>) -> Result<Self> {
        self.check_len("domains", domains.len())?;
        self.domains = Some(domains);
        Ok(self)
    }

    fn check_len(&self, what: &'static str, len: usize) -> Result<()> {
        if len != self.size() {
            return Err(Error::DimensionMismatch {
                context: what,
                expected: self.size(),
                found: len,
            });
        }
        Ok(())
    }

    /// Population size N.
    pub fn size(&self) -> usize {
        self.covariates.len() / self.ncols
    }

    /// Covariate dimension p.
    pub fn dim(&self) -> usize {
        self.ncols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.covariates[i * self.ncols..(i + 1) * self.ncols]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.covariates.chunks_exact(self.ncols)
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.covariate_names.iter().position(|n| n == name)
    }

    pub fn outcomes(&self) -> Option<&[f64]> {
        self.outcomes.as_deref()
    }

    pub fn selection_probs_true(&self) -> Option<&[f64]> {
        self.selection_probs_true.as_deref()
    }

    pub fn strata(&self) -> Option<&[i64]> {
        self.strata.as_deref()
    }

    pub fn domains(&self) -> Option<&[i64]> {
        self.domains.as_deref()
    }

    /// Column means of the covariates over all N units.
    pub fn covariate_means(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.ncols];
        for row in self.rows() {
            for (s, v) in sums.iter_mut().zip(row) {
                *s += v;
            }
        }
        let n = self.size() as f64;
        sums.into_iter().map(|s| s / n).collect()
    }
}

/// Finite-population mean of the outcome.
pub fn population_mean(pop: &FinitePopulation) -> Result<f64> {
    let y = pop
        .outcomes()
        .ok_or_else(|| Error::Precondition("population outcomes are not available".into()))?;
    Ok(y.iter().sum::<f64>() / y.len() as f64)
}

/// Per-stratum design parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumDesign {
    pub label: i64,
    pub sample_size: usize,
    pub population_size: usize,
}

/// Sampling design of the probability sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Design {
    Srswor {
        sample_size: usize,
        population_size: usize,
    },
    StratifiedSrswor {
        strata: Vec<StratumDesign>,
    },
}

/// Probability sample with known inclusion probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilitySample {
    indices: Vec<usize>,
    inclusion_probs: Vec<f64>,
    outcomes: Vec<f64>,
    design: Design,
}

impl ProbabilitySample {
    pub fn new(
        indices: Vec<usize>,
        inclusion_probs: Vec<f64>,
        outcomes: Vec<f64>,
        design: Design,
    ) -> Result<Self> {
        let n = indices.len();
        if n == 0 {
            return Err(Error::Precondition("probability sample is empty".into()));
        }
        if inclusion_probs.len() != n || outcomes.len() != n {
            return Err(Error::DimensionMismatch {
                context: "probability sample columns",
                expected: n,
                found: inclusion_probs.len().min(outcomes.len()),
            });
        }
        if !distinct(&indices) {
            return Err(Error::Precondition("probability sample indices are not distinct".into()));
        }
        if let Some(p) = inclusion_probs.iter().find(|p| !(**p > 0.0 && **p <= 1.0)) {
            return Err(Error::Precondition(format!("inclusion probability {p} outside (0, 1]")));
        }
        if outcomes.iter().any(|y| !y.is_finite()) {
            return Err(Error::Precondition("non-finite outcome in probability sample".into()));
        }
        if let Design::Srswor {
            sample_size,
            population_size,
        } = design
        {
            let expected = sample_size as f64 / population_size as f64;
            if sample_size != n || inclusion_probs.iter().any(|p| *p != expected) {
                return Err(Error::Precondition(
                    "SRSWOR inclusion probabilities must all equal n_A / N".into(),
                ));
            }
        }
        Ok(Self {
            indices,
            inclusion_probs,
            outcomes,
            design,
        })
    }

    /// SRSWOR sample over `indices` of a population of size `population_size`.
    pub fn srswor(indices: Vec<usize>, outcomes: Vec<f64>, population_size: usize) -> Result<Self> {
        let n = indices.len();
        let pi = n as f64 / population_size as f64;
        Self::new(
            indices,
            vec![pi; n],
            outcomes,
            Design::Srswor {
                sample_size: n,
                population_size,
            },
        )
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn inclusion_probs(&self) -> &[f64] {
        &self.inclusion_probs
    }

    pub fn outcomes(&self) -> &[f64] {
        &self.outcomes
    }

    pub fn design(&self) -> &Design {
        &self.design
    }

    /// Design weights 1/π_A.
    pub fn design_weights(&self) -> Vec<f64> {
        self.inclusion_probs.iter().map(|p| 1.0 / p).collect()
    }

    /// Σ 1/π_A with compensated summation, so an SRSWOR sample totals N exactly.
    pub fn design_weight_total(&self) -> f64 {
        compensated_sum(self.inclusion_probs.iter().map(|p| 1.0 / p))
    }
}

/// Self-selected sample with unknown selection probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct NonProbabilitySample {
    indices: Vec<usize>,
    outcomes: Vec<f64>,
}

impl NonProbabilitySample {
    pub fn new(indices: Vec<usize>, outcomes: Vec<f64>) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Precondition("non-probability sample is empty".into()));
        }
        if outcomes.len() != indices.len() {
            return Err(Error::DimensionMismatch {
                context: "non-probability sample outcomes",
                expected: indices.len(),
                found: outcomes.len(),
            });
        }
        if !distinct(&indices) {
            return Err(Error::Precondition(
                "non-probability sample indices are not distinct".into(),
            ));
        }
        if outcomes.iter().any(|y| !y.is_finite()) {
            return Err(Error::Precondition("non-finite outcome in non-probability sample".into()));
        }
        Ok(Self { indices, outcomes })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn outcomes(&self) -> &[f64] {
        &self.outcomes
    }

    /// Selection indicators δ_B over a population of size `n`.
    pub fn indicators(&self, n: usize) -> Vec<bool> {
        let mut delta = vec![false; n];
        for &i in &self.indices {
            if i < n {
                delta[i] = true;
            }
        }
        delta
    }

    /// Returns a copy with rows reordered by `perm` (row r of the result is row `perm[r]`).
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        Self::new(
            perm.iter().map(|&r| self.indices[r]).collect(),
            perm.iter().map(|&r| self.outcomes[r]).collect(),
        )
    }
}

/// Neumaier compensated summation.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0_f64;
    let mut comp = 0.0_f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

fn distinct(indices: &[usize]) -> bool {
    let mut seen = HashSet::with_capacity(indices.len());
    indices.iter().all(|i| seen.insert(*i))
}

/// Point estimate with its standard error and Wald interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateWithSE {
    pub estimate: f64,
    pub std_error: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub method: String,
}

/// A problem found while checking a sample against its population.
#[derive(Debug, Clone, PartialEq)]
pub enum Diagnostic {
    IndexOutOfRange { index: usize, population_size: usize },
    DuplicateIndex { index: usize },
    InvalidProbability { index: usize, value: f64 },
    EmptySample,
    OutcomeMismatch { index: usize },
    DesignMismatch(String),
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Diagnostic::IndexOutOfRange {
                index,
                population_size,
            } => write!(f, "unit index {} outside 1..={population_size}", index + 1),
            Diagnostic::DuplicateIndex { index } => write!(f, "unit index {} repeated", index + 1),
            Diagnostic::InvalidProbability { index, value } => {
                write!(f, "unit {} has inclusion probability {value} outside (0, 1]", index + 1)
            }
            Diagnostic::EmptySample => write!(f, "sample is empty"),
            Diagnostic::OutcomeMismatch { index } => {
                write!(f, "unit {} outcome differs from the population record", index + 1)
            }
            Diagnostic::DesignMismatch(msg) => write!(f, "design mismatch: {msg}"),
        }
    }
}

/// Read-only view over the unit-level content of either sample type.
pub trait SampleUnits {
    fn unit_indices(&self) -> &[usize];
    fn unit_outcomes(&self) -> &[f64];
    fn unit_probabilities(&self) -> Option<&[f64]> {
        None
    }
    fn unit_design(&self) -> Option<&Design> {
        None
    }
}

impl SampleUnits for ProbabilitySample {
    fn unit_indices(&self) -> &[usize] {
        &self.indices
    }
    fn unit_outcomes(&self) -> &[f64] {
        &self.outcomes
    }
    fn unit_probabilities(&self) -> Option<&[f64]> {
        Some(&self.inclusion_probs)
    }
    fn unit_design(&self) -> Option<&Design> {
        Some(&self.design)
    }
}

impl SampleUnits for NonProbabilitySample {
    fn unit_indices(&self) -> &[usize] {
        &self.indices
    }
    fn unit_outcomes(&self) -> &[f64] {
        &self.outcomes
    }
}

/// Raw sample content that has not passed the constructors' checks.
#[derive(Debug, Clone, Default)]
pub struct RawSample {
    pub indices: Vec<usize>,
    pub outcomes: Vec<f64>,
    pub probabilities: Option<Vec<f64>>,
}

impl SampleUnits for RawSample {
    fn unit_indices(&self) -> &[usize] {
        &self.indices
    }
    fn unit_outcomes(&self) -> &[f64] {
        &self.outcomes
    }
    fn unit_probabilities(&self) -> Option<&[f64]> {
        self.probabilities.as_deref()
    }
}

/// Checks index bounds, distinctness and probability ranges.
///
/// Returns every problem found rather than stopping at the first.
pub fn validate_sample_against_population<S: SampleUnits + ?Sized>(
    sample: &S,
    pop: &FinitePopulation,
) -> std::result::Result<(), Vec<Diagnostic>> {
    let n = pop.size();
    let mut diags = Vec::new();
    let indices = sample.unit_indices();
    if indices.is_empty() {
        diags.push(Diagnostic::EmptySample);
    }
    let mut seen = HashSet::new();
    for &i in indices {
        if i >= n {
            diags.push(Diagnostic::IndexOutOfRange {
                index: i,
                population_size: n,
            });
        }
        if !seen.insert(i) {
            diags.push(Diagnostic::DuplicateIndex { index: i });
        }
    }
    if let Some(probs) = sample.unit_probabilities() {
        for (&i, &p) in indices.iter().zip(probs) {
            if !(p > 0.0 && p <= 1.0) {
                diags.push(Diagnostic::InvalidProbability { index: i, value: p });
            }
        }
    }
    if let Some(truth) = pop.outcomes() {
        for (&i, &y) in indices.iter().zip(sample.unit_outcomes()) {
            if i < n && truth[i] != y {
                diags.push(Diagnostic::OutcomeMismatch { index: i });
            }
        }
    }
    match sample.unit_design() {
        Some(Design::Srswor {
            population_size, ..
        }) if *population_size != n => diags.push(Diagnostic::DesignMismatch(format!(
            "design population size {population_size} differs from N = {n}"
        ))),
        Some(Design::StratifiedSrswor { strata }) => match pop.strata() {
            None => diags.push(Diagnostic::DesignMismatch(
                "stratified design but the population carries no strata".into(),
            )),
            Some(labels) => {
                for s in strata {
                    let count = labels.iter().filter(|l| **l == s.label).count();
                    if count != s.population_size {
                        diags.push(Diagnostic::DesignMismatch(format!(
                            "stratum {} has {count} population units, design says {}",
                            s.label, s.population_size
                        )));
                    }
                }
            }
        },
        _ => {}
    }
    if diags.is_empty() {
        Ok(())
    } else {
        Err(diags)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pop3() -> FinitePopulation {
        FinitePopulation::from_rows(&[vec![0.0], vec![1.0], vec![2.0]])
            .unwrap()
            .with_outcomes(vec![1.0, 2.0, 3.0])
            .unwrap()
    }

    #[test]
    fn mean_of_outcomes() {
        assert_eq!(population_mean(&pop3()).unwrap(), 2.0);
        let c = FinitePopulation::from_rows(&[vec![0.0], vec![5.0]])
            .unwrap()
            .with_outcomes(vec![4.25, 4.25])
            .unwrap();
        assert_eq!(population_mean(&c).unwrap(), 4.25);
    }

    #[test]
    fn missing_outcomes_is_precondition_error() {
        let pop = FinitePopulation::from_rows(&[vec![0.0]]).unwrap();
        assert!(matches!(population_mean(&pop), Err(Error::Precondition(_))));
    }

    #[test]
    fn selection_probs_must_be_open_interval() {
        let pop = FinitePopulation::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        assert!(pop.clone().with_selection_probs(vec![0.5, 1.0]).is_err());
        assert!(pop.with_selection_probs(vec![0.5, 0.2]).is_ok());
    }

    #[test]
    fn out_of_range_index_is_diagnosed() {
        let pop = pop3();
        let raw = RawSample {
            indices: vec![0, 3],
            outcomes: vec![1.0, 9.0],
            probabilities: Some(vec![0.5, 0.5]),
        };
        let diags = validate_sample_against_population(&raw, &pop).unwrap_err();
        assert!(diags.contains(&Diagnostic::IndexOutOfRange {
            index: 3,
            population_size: 3
        }));
    }

    #[test]
    fn zero_probability_is_diagnosed() {
        let raw = RawSample {
            indices: vec![0, 1],
            outcomes: vec![1.0, 2.0],
            probabilities: Some(vec![0.0, 0.5]),
        };
        let diags = validate_sample_against_population(&raw, &pop3()).unwrap_err();
        assert_eq!(
            diags,
            vec![Diagnostic::InvalidProbability {
                index: 0,
                value: 0.0
            }]
        );
    }

    #[test]
    fn valid_srswor_is_ok() {
        let a = ProbabilitySample::srswor(vec![2, 0], vec![3.0, 1.0], 3).unwrap();
        assert!(validate_sample_against_population(&a, &pop3()).is_ok());
        assert_eq!(a.design_weight_total(), 3.0);
    }

    #[test]
    fn srswor_requires_equal_probabilities() {
        let design = Design::Srswor {
            sample_size: 2,
            population_size: 3,
        };
        assert!(ProbabilitySample::new(vec![0, 1], vec![0.5, 0.5], vec![1.0, 2.0], design).is_err());
    }

    #[test]
    fn duplicate_indices_rejected() {
        assert!(NonProbabilitySample::new(vec![1, 1], vec![0.0, 0.0]).is_err());
        assert!(NonProbabilitySample::new(vec![], vec![]).is_err());
    }
}
