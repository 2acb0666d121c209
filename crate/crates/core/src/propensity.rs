//! Candidate logistic selection models and their calibration-type
//! estimating equations
//!
//! ```text
//! Σ_{i=1..N} { δ_Bi / π_k(x_i, y_i; φ) − 1 } z_i = 0
//! ```
//!
//! where `z_i` is an instrument vector built from covariates only. Because the
//! instruments are observable for every unit, the population part of the sum
//! is a constant total and the outcome is only ever needed on B.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{FinitePopulation, NonProbabilitySample};
use crate::error::{Error, Result};
use crate::linalg::{self, logistic};

/// Lower and upper clamp for fitted probabilities inside the solver.
pub const PROB_CLAMP: f64 = 1e-10;

/// A root where every selected unit has 1 − π below this is reported as a
/// boundary solution.
pub const SATURATION: f64 = 1e-6;

/// A non-intercept term of a linear predictor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Term {
    /// Covariate column, zero-based.
    Covariate(usize),
    /// The outcome y.
    Outcome,
}

/// A candidate selection model: logit π = φ₀ + Σ φ_j term_j.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityModelSpec {
    pub name: String,
    predictors: Vec<Term>,
    instruments: Vec<usize>,
}

impl PropensityModelSpec {
    /// Builds a spec with instruments (1, x_1, …, x_p).
    pub fn new(name: impl Into<String>, predictors: Vec<Term>, covariate_dim: usize) -> Result<Self> {
        Self::with_instruments(name, predictors, (0..covariate_dim).collect())
    }

    pub fn with_instruments(name: impl Into<String>, predictors: Vec<Term>, instruments: Vec<usize>) -> Result<Self> {
        let spec = Self {
            name: name.into(),
            predictors,
            instruments,
        };
        if spec.instrument_dim() != spec.dim() {
            return Err(Error::config(
                "candidates",
                format!(
                    "model `{}` has {} coefficients but {} instruments; the estimating system must be square",
                    spec.name,
                    spec.dim(),
                    spec.instrument_dim()
                ),
            ));
        }
        Ok(spec)
    }

    /// Parses `"logit ~ 1 + x1 + y"`, optionally followed by `"| 1 + x1 + x2"`
    /// to choose instruments. Covariate names resolve against `covariate_names`.
    pub fn parse(formula: &str, covariate_names: &[String]) -> Result<Self> {
        let bad = |msg: String| Error::config("candidates", format!("`{formula}`: {msg}"));
        let rhs = formula
            .split_once('~')
            .map(|(lhs, rhs)| {
                if lhs.trim() == "logit" {
                    Ok(rhs)
                } else {
                    Err(bad("left-hand side must be `logit`".into()))
                }
            })
            .unwrap_or_else(|| Err(bad("expected `logit ~ ...`".into())))?;
        let (pred_part, inst_part) = match rhs.split_once('|') {
            Some((p, i)) => (p, Some(i)),
            None => (rhs, None),
        };
        let resolve = |name: &str| -> Result<Term> {
            if name == "y" {
                return Ok(Term::Outcome);
            }
            covariate_names
                .iter()
                .position(|n| n == name)
                .map(Term::Covariate)
                .ok_or_else(|| bad(format!("unknown term `{name}`")))
        };
        let split_terms = |part: &str| -> Result<Vec<String>> {
            let terms: Vec<String> = part.split('+').map(|t| t.trim().to_string()).collect();
            if terms.first().map(String::as_str) != Some("1") {
                return Err(bad("terms must start with the intercept `1`".into()));
            }
            if terms.iter().any(String::is_empty) {
                return Err(bad("empty term".into()));
            }
            Ok(terms.into_iter().skip(1).collect())
        };
        let predictors = split_terms(pred_part)?
            .iter()
            .map(|t| resolve(t))
            .collect::<Result<Vec<_>>>()?;
        let instruments = match inst_part {
            Some(part) => split_terms(part)?
                .iter()
                .map(|t| match resolve(t)? {
                    Term::Covariate(j) => Ok(j),
                    Term::Outcome => Err(bad("instruments must not involve y".into())),
                })
                .collect::<Result<Vec<_>>>()?,
            None => (0..covariate_names.len()).collect(),
        };
        Self::with_instruments(formula.trim(), predictors, instruments)
    }

    /// Number of coefficients, including the intercept.
    pub fn dim(&self) -> usize {
        1 + self.predictors.len()
    }

    pub fn instrument_dim(&self) -> usize {
        1 + self.instruments.len()
    }

    pub fn predictors(&self) -> &[Term] {
        &self.predictors
    }

    pub fn instruments(&self) -> &[usize] {
        &self.instruments
    }

    pub fn uses_outcome(&self) -> bool {
        self.predictors.contains(&Term::Outcome)
    }

    fn max_covariate(&self) -> Option<usize> {
        self.predictors
            .iter()
            .filter_map(|t| match t {
                Term::Covariate(j) => Some(*j),
                Term::Outcome => None,
            })
            .chain(self.instruments.iter().copied())
            .max()
    }

    /// Writes the predictor vector (1, terms…) for `(x, y)` into `out`.
    #[inline]
    pub fn predictor_vector_into(&self, x: &[f64], y: f64, out: &mut [f64]) {
        out[0] = 1.0;
        for (o, t) in out[1..].iter_mut().zip(&self.predictors) {
            *o = match t {
                Term::Covariate(j) => x[*j],
                Term::Outcome => y,
            };
        }
    }

    #[inline]
    pub fn instrument_vector_into(&self, x: &[f64], out: &mut [f64]) {
        out[0] = 1.0;
        for (o, j) in out[1..].iter_mut().zip(&self.instruments) {
            *o = x[*j];
        }
    }

    fn check_covariates(&self, p: usize) -> Result<()> {
        match self.max_covariate() {
            Some(j) if j >= p => Err(Error::DimensionMismatch {
                context: "propensity model covariates",
                expected: j + 1,
                found: p,
            }),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for PropensityModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

/// A candidate model with estimated coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedPropensity {
    pub spec: PropensityModelSpec,
    pub phi_hat: Vec<f64>,
    pub converged: bool,
    pub residual_norm: f64,
    pub iterations: usize,
}

impl FittedPropensity {
    /// Wraps known coefficients, e.g. a true simulation model.
    pub fn from_coefficients(spec: PropensityModelSpec, phi: Vec<f64>) -> Result<Self> {
        if phi.len() != spec.dim() {
            return Err(Error::DimensionMismatch {
                context: "propensity coefficients",
                expected: spec.dim(),
                found: phi.len(),
            });
        }
        Ok(Self {
            spec,
            phi_hat: phi,
            converged: true,
            residual_norm: 0.0,
            iterations: 0,
        })
    }

    /// Linear predictor split as `a(x) + b·y`; returns `(a, b)`.
    #[inline]
    pub fn split_linear_predictor(&self, x: &[f64]) -> (f64, f64) {
        let mut a = self.phi_hat[0];
        let mut b = 0.0;
        for (coef, t) in self.phi_hat[1..].iter().zip(&self.spec.predictors) {
            match t {
                Term::Covariate(j) => a += coef * x[*j],
                Term::Outcome => b += coef,
            }
        }
        (a, b)
    }

    #[inline]
    pub fn predict_unchecked(&self, x: &[f64], y: f64) -> f64 {
        let (a, b) = self.split_linear_predictor(x);
        logistic(a + b * y)
    }

    /// Coefficient on y (zero when the model is outcome-free).
    pub fn outcome_coefficient(&self) -> f64 {
        self.phi_hat[1..]
            .iter()
            .zip(&self.spec.predictors)
            .filter(|(_, t)| **t == Term::Outcome)
            .map(|(c, _)| c)
            .sum()
    }
}

/// π_k(x, y; φ̂) = logistic(φ̂ᵀ z(x, y)).
pub fn predict_pi(fit: &FittedPropensity, x: &[f64], y: f64) -> Result<f64> {
    if fit.phi_hat.len() != fit.spec.dim() {
        return Err(Error::DimensionMismatch {
            context: "propensity coefficients",
            expected: fit.spec.dim(),
            found: fit.phi_hat.len(),
        });
    }
    fit.spec.check_covariates(x.len())?;
    Ok(fit.predict_unchecked(x, y))
}

/// Solver settings for the propensity estimating equations.
#[derive(Debug, Clone, Copy)]
pub struct PropensitySolverOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
}

impl Default for PropensitySolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 100,
            max_halvings: 30,
        }
    }
}

struct Workspace {
    /// Predictor vectors over B, row-major.
    pred: Vec<f64>,
    /// Instrument vectors over B, row-major.
    inst: Vec<f64>,
    /// Σ_{i=1..N} z_i.
    total: Vec<f64>,
    dim: usize,
}

impl Workspace {
    fn new(pop: &FinitePopulation, b: &NonProbabilitySample, spec: &PropensityModelSpec) -> Self {
        let dim = spec.dim();
        let mut total = vec![0.0; dim];
        let mut z = vec![0.0; dim];
        for x in pop.rows() {
            spec.instrument_vector_into(x, &mut z);
            for (t, v) in total.iter_mut().zip(&z) {
                *t += v;
            }
        }
        let nb = b.len();
        let mut pred = vec![0.0; nb * dim];
        let mut inst = vec![0.0; nb * dim];
        for (k, (&i, &y)) in b.indices().iter().zip(b.outcomes()).enumerate() {
            let x = pop.row(i);
            spec.predictor_vector_into(x, y, &mut pred[k * dim..(k + 1) * dim]);
            spec.instrument_vector_into(x, &mut inst[k * dim..(k + 1) * dim]);
        }
        Self { pred, inst, total, dim }
    }

    /// Every selected unit has a fitted probability within `SATURATION` of one.
    fn saturated(&self, phi: &[f64]) -> bool {
        self.pred
            .chunks_exact(self.dim)
            .all(|zp| logistic(linalg::dot(phi, zp)) >= 1.0 - SATURATION)
    }

    /// Estimating function, its Jacobian, and whether any B unit sits on the clamp.
    fn evaluate(&self, phi: &[f64], with_jacobian: bool) -> (Vec<f64>, Option<DMatrix<f64>>, bool) {
        let d = self.dim;
        let mut f: Vec<f64> = self.total.iter().map(|t| -t).collect();
        let mut jac = with_jacobian.then(|| DMatrix::zeros(d, d));
        let mut clamped = false;
        for (zp, zi) in self.pred.chunks_exact(d).zip(self.inst.chunks_exact(d)) {
            let eta = linalg::dot(phi, zp);
            let raw = logistic(eta);
            let pi = raw.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            if pi != raw || raw >= 1.0 - PROB_CLAMP {
                clamped = true;
            }
            let inv = 1.0 / pi;
            for (fj, z) in f.iter_mut().zip(zi) {
                *fj += z * inv;
            }
            if let Some(jac) = jac.as_mut() {
                // d(1/π)/dη = −(1 − π)/π = −exp(−η)
                let slope = -(-eta).exp().min(1.0 / PROB_CLAMP);
                for r in 0..d {
                    let zr = zi[r] * slope;
                    for c in 0..d {
                        jac[(r, c)] += zr * zp[c];
                    }
                }
            }
        }
        (f, jac, clamped)
    }
}

/// Solves the candidate's estimating equations by Newton's method with step halving.
pub fn solve_candidate_propensity(
    pop: &FinitePopulation,
    b: &NonProbabilitySample,
    spec: &PropensityModelSpec,
) -> Result<FittedPropensity> {
    solve_candidate_propensity_with(pop, b, spec, PropensitySolverOptions::default())
}

pub fn solve_candidate_propensity_with(
    pop: &FinitePopulation,
    b: &NonProbabilitySample,
    spec: &PropensityModelSpec,
    opts: PropensitySolverOptions,
) -> Result<FittedPropensity> {
    spec.check_covariates(pop.dim())?;
    if b.is_empty() {
        return Err(Error::Precondition("non-probability sample is empty".into()));
    }
    let ws = Workspace::new(pop, b, spec);
    let boundary = || Error::Boundary(format!("model `{}`: fitted selection probabilities reach 1", spec.name));
    let mut phi = vec![0.0; spec.dim()];
    let (mut f, mut jac, mut clamped) = ws.evaluate(&phi, true);
    let norm2 = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
    for iter in 0..=opts.max_iter {
        let resid = linalg::max_abs(&f);
        if !resid.is_finite() {
            return Err(Error::NonConvergence {
                solver: "propensity estimating equations",
                iterations: iter,
                residual: resid,
            });
        }
        if resid <= opts.tol {
            if clamped || ws.saturated(&phi) {
                return Err(boundary());
            }
            return Ok(FittedPropensity {
                spec: spec.clone(),
                phi_hat: phi,
                converged: true,
                residual_norm: resid,
                iterations: iter,
            });
        }
        if iter == opts.max_iter {
            break;
        }
        let j = jac.take().expect("jacobian computed");
        let rhs = DVector::from_iterator(f.len(), f.iter().map(|v| -v));
        let step = match linalg::solve(&j, &rhs, "propensity Jacobian") {
            Ok(s) => s,
            Err(_) if clamped => return Err(boundary()),
            Err(e) => return Err(e),
        };
        let base = norm2(&f);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..opts.max_halvings {
            let trial: Vec<f64> = phi.iter().zip(step.iter()).map(|(p, s)| p + t * s).collect();
            let (ft, _, _) = ws.evaluate(&trial, false);
            if norm2(&ft) < base {
                phi = trial;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            if clamped {
                return Err(boundary());
            }
            return Err(Error::NonConvergence {
                solver: "propensity estimating equations",
                iterations: iter,
                residual: resid,
            });
        }
        let (nf, nj, nc) = ws.evaluate(&phi, true);
        f = nf;
        jac = nj;
        clamped = nc;
    }
    if clamped {
        return Err(boundary());
    }
    Err(Error::NonConvergence {
        solver: "propensity estimating equations",
        iterations: opts.max_iter,
        residual: linalg::max_abs(&f),
    })
}

/// Max-norm of Σ_i {δ_Bi/π_i − 1} z_i at the fitted coefficients (no clamping).
pub fn estimating_function_residual(pop: &FinitePopulation, b: &NonProbabilitySample, fit: &FittedPropensity) -> f64 {
    let ws = Workspace::new(pop, b, &fit.spec);
    linalg::max_abs(&ws.evaluate(&fit.phi_hat, false).0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names() -> Vec<String> {
        vec!["x1".into(), "x2".into()]
    }

    #[test]
    fn parses_formulas() {
        let spec = PropensityModelSpec::parse("logit ~ 1 + x1 + y", &names()).unwrap();
        assert_eq!(spec.predictors(), &[Term::Covariate(0), Term::Outcome]);
        assert_eq!(spec.instruments(), &[0, 1]);
        let spec = PropensityModelSpec::parse("logit ~ 1 | 1", &names()).unwrap();
        assert_eq!(spec.dim(), 1);
        assert!(PropensityModelSpec::parse("logit ~ 1 + x3", &names()).is_err());
        assert!(PropensityModelSpec::parse("logit ~ 1 + x1", &names()).is_err());
        assert!(PropensityModelSpec::parse("logit ~ 1 + x1 + y | 1 + y + x2", &names()).is_err());
        assert!(PropensityModelSpec::parse("probit ~ 1 + x1 + x2", &names()).is_err());
    }

    #[test]
    fn zero_coefficients_predict_one_half() {
        let spec = PropensityModelSpec::parse("logit ~ 1 + x1 + y", &names()).unwrap();
        let fit = FittedPropensity::from_coefficients(spec, vec![0.0; 3]).unwrap();
        assert_eq!(predict_pi(&fit, &[3.0, -1.0], 7.5).unwrap(), 0.5);
    }

    #[test]
    fn intercept_only_inverts_logit() {
        let spec = PropensityModelSpec::parse("logit ~ 1 | 1", &names()).unwrap();
        let fit = FittedPropensity::from_coefficients(spec, vec![linalg::logit(0.4)]).unwrap();
        assert!((predict_pi(&fit, &[0.0, 0.0], 0.0).unwrap() - 0.4).abs() < 1e-15);
    }

    #[test]
    fn non_square_system_rejected() {
        let spec = PropensityModelSpec::new(
            "four",
            vec![Term::Covariate(0), Term::Covariate(1), Term::Outcome],
            2,
        );
        assert!(matches!(spec, Err(Error::Config { .. })));
    }

    #[test]
    fn dimension_mismatch_detected() {
        let spec = PropensityModelSpec::parse("logit ~ 1 + x1 + x2", &names()).unwrap();
        let fit = FittedPropensity::from_coefficients(spec, vec![0.0; 3]).unwrap();
        assert!(matches!(predict_pi(&fit, &[1.0], 0.0), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn intercept_only_has_closed_form() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let pop = FinitePopulation::from_rows(&rows).unwrap();
        let b = NonProbabilitySample::new(vec![0, 3, 5, 9], vec![1.0; 4]).unwrap();
        let spec = PropensityModelSpec::parse("logit ~ 1 | 1", pop.covariate_names()).unwrap();
        let fit = solve_candidate_propensity(&pop, &b, &spec).unwrap();
        assert!((fit.phi_hat[0] - linalg::logit(0.4)).abs() < 1e-10);
        assert!((fit.phi_hat[0] + 0.405_465_108_108_164_4).abs() < 1e-10);
        assert!(fit.residual_norm <= 1e-8);
    }

    #[test]
    fn full_selection_is_boundary() {
        let rows: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64]).collect();
        let pop = FinitePopulation::from_rows(&rows).unwrap();
        let b = NonProbabilitySample::new((0..6).collect(), vec![0.0; 6]).unwrap();
        let spec = PropensityModelSpec::parse("logit ~ 1 | 1", pop.covariate_names()).unwrap();
        assert!(matches!(solve_candidate_propensity(&pop, &b, &spec), Err(Error::Boundary(_))));
    }
}
