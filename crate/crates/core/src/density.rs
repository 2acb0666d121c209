//! Conditional outcome density f(y | x; β) fitted from the probability sample
//! by design-weighted pseudo maximum likelihood, and the smoothed propensity
//! π̃(x) = E{π(x, Y) | X = x} it induces.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{FinitePopulation, ProbabilitySample};
use crate::error::{Error, Result};
use crate::linalg::{self, logistic, Evaluation, NewtonOptions};
use crate::propensity::FittedPropensity;

/// Default number of Gauss–Hermite nodes for the normal family.
pub const DEFAULT_QUADRATURE_NODES: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DensityFamily {
    /// y | x ~ N((1, xᵀ)γ, σ²).
    Normal,
    /// Softmax over observed categories with scores linear in (1, xᵀ).
    Multinomial,
}

impl std::str::FromStr for DensityFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(DensityFamily::Normal),
            "multinomial" => Ok(DensityFamily::Multinomial),
            other => Err(Error::config("density_family", format!("unknown family `{other}`"))),
        }
    }
}

/// Gauss–Hermite rule rescaled for expectations under N(0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct GaussHermite {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussHermite {
    /// Computes an `n`-point rule by Newton iteration on the orthonormal
    /// Hermite recurrence.
    pub fn new(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::Precondition(format!("quadrature needs at least 2 nodes, got {n}")));
        }
        let mut x = vec![0.0; n];
        let mut w = vec![0.0; n];
        let pim4 = std::f64::consts::PI.powf(-0.25);
        let nf = n as f64;
        let m = n.div_ceil(2);
        let mut z = 0.0_f64;
        for i in 0..m {
            z = match i {
                0 => (2.0 * nf + 1.0).sqrt() - 1.855_75 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
                1 => z - 1.14 * nf.powf(0.426) / z,
                2 => 1.86 * z - 0.86 * x[0],
                3 => 1.91 * z - 0.91 * x[1],
                _ => 2.0 * z - x[i - 2],
            };
            let mut pp = 0.0;
            for _ in 0..100 {
                let mut p1 = pim4;
                let mut p2 = 0.0;
                for j in 0..n {
                    let p3 = p2;
                    p2 = p1;
                    let jf = j as f64;
                    p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
                }
                pp = (2.0 * nf).sqrt() * p2;
                let z1 = z;
                z = z1 - p1 / pp;
                if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                    break;
                }
            }
            x[i] = z;
            x[n - 1 - i] = -z;
            w[i] = 2.0 / (pp * pp);
            w[n - 1 - i] = w[i];
        }
        let sqrt2 = std::f64::consts::SQRT_2;
        let inv_sqrt_pi = 1.0 / std::f64::consts::PI.sqrt();
        Ok(Self {
            nodes: x.iter().rev().map(|t| t * sqrt2).collect(),
            weights: w.iter().rev().map(|v| v * inv_sqrt_pi).collect(),
        })
    }

    /// Shared rule with [`DEFAULT_QUADRATURE_NODES`] nodes.
    pub fn standard() -> &'static GaussHermite {
        static RULE: OnceLock<GaussHermite> = OnceLock::new();
        RULE.get_or_init(|| GaussHermite::new(DEFAULT_QUADRATURE_NODES).expect("valid node count"))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Nodes for a standard normal variable.
    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    /// Weights summing to one.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// E g(μ + σZ) for Z ~ N(0, 1).
    pub fn expect<F: Fn(f64) -> f64>(&self, mean: f64, sd: f64, g: F) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(z, w)| w * g(mean + sd * z))
            .sum()
    }
}

/// Fitted conditional density.
///
/// For the normal family `beta_hat` is `(γ₀, …, γ_p, σ²)`. For the
/// multinomial family it holds the score coefficients over `(1, xᵀ)` for
/// each non-reference category, concatenated; the first category's scores
/// are pinned to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeDensityFit {
    pub family: DensityFamily,
    pub beta_hat: Vec<f64>,
    pub categories: Option<Vec<f64>>,
    /// Normal fit with (numerically) zero residual variance.
    pub degenerate: bool,
    /// Max-norm of the weighted pseudo-score at `beta_hat`.
    pub score_norm: f64,
    covariate_dim: usize,
}

impl OutcomeDensityFit {
    pub fn normal(coefficients: Vec<f64>, variance: f64) -> Result<Self> {
        if coefficients.is_empty() || !(variance >= 0.0) {
            return Err(Error::Precondition("normal density needs coefficients and σ² ≥ 0".into()));
        }
        let covariate_dim = coefficients.len() - 1;
        let mut beta = coefficients;
        beta.push(variance);
        Ok(Self {
            family: DensityFamily::Normal,
            beta_hat: beta,
            categories: None,
            degenerate: variance == 0.0,
            score_norm: 0.0,
            covariate_dim,
        })
    }

    pub fn multinomial(categories: Vec<f64>, scores: Vec<f64>, covariate_dim: usize) -> Result<Self> {
        if categories.is_empty() || scores.len() != (categories.len() - 1) * (covariate_dim + 1) {
            return Err(Error::DimensionMismatch {
                context: "multinomial scores",
                expected: categories.len().saturating_sub(1) * (covariate_dim + 1),
                found: scores.len(),
            });
        }
        Ok(Self {
            family: DensityFamily::Multinomial,
            beta_hat: scores,
            categories: Some(categories),
            degenerate: false,
            score_norm: 0.0,
            covariate_dim,
        })
    }

    pub fn covariate_dim(&self) -> usize {
        self.covariate_dim
    }

    pub fn dim(&self) -> usize {
        self.beta_hat.len()
    }

    /// Same family and categories with a different parameter vector.
    pub fn with_params(&self, beta: &[f64]) -> Self {
        assert_eq!(beta.len(), self.beta_hat.len(), "parameter length");
        let mut out = self.clone();
        out.beta_hat = beta.to_vec();
        out
    }

    #[inline]
    fn linear(coefs: &[f64], x: &[f64]) -> f64 {
        coefs[0] + linalg::dot(&coefs[1..], x)
    }

    /// Normal family: conditional mean at `x`.
    #[inline]
    pub fn normal_mean(&self, x: &[f64]) -> f64 {
        Self::linear(&self.beta_hat[..=self.covariate_dim], x)
    }

    /// Normal family: residual variance σ².
    pub fn variance(&self) -> f64 {
        self.beta_hat[self.covariate_dim + 1]
    }

    /// Multinomial family: category probabilities at `x`.
    pub fn category_probs_into(&self, x: &[f64], out: &mut [f64]) {
        let d = self.covariate_dim + 1;
        out[0] = 0.0;
        for (c, block) in self.beta_hat.chunks_exact(d).enumerate() {
            out[c + 1] = Self::linear(block, x);
        }
        let max = out.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        let mut total = 0.0;
        for v in out.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in out.iter_mut() {
            *v /= total;
        }
    }

    pub fn category_probs(&self, x: &[f64]) -> Vec<f64> {
        let c = self.categories.as_ref().map_or(0, Vec::len);
        let mut out = vec![0.0; c];
        self.category_probs_into(x, &mut out);
        out
    }

    fn category_index(&self, y: f64) -> Option<usize> {
        self.categories.as_ref()?.iter().position(|c| *c == y)
    }

    /// ∂ log f(y | x; β) / ∂β, written into `out`.
    pub fn score_into(&self, x: &[f64], y: f64, out: &mut [f64]) -> Result<()> {
        match self.family {
            DensityFamily::Normal => {
                let s2 = self.variance();
                let r = y - self.normal_mean(x);
                out[0] = r / s2;
                for (o, xj) in out[1..=self.covariate_dim].iter_mut().zip(x) {
                    *o = r * xj / s2;
                }
                out[self.covariate_dim + 1] = -0.5 / s2 + 0.5 * r * r / (s2 * s2);
            }
            DensityFamily::Multinomial => {
                let k = self
                    .category_index(y)
                    .ok_or_else(|| Error::Precondition(format!("outcome {y} is not a fitted category")))?;
                let c = self.categories.as_ref().map_or(0, Vec::len);
                let mut probs = vec![0.0; c];
                self.category_probs_into(x, &mut probs);
                let d = self.covariate_dim + 1;
                for (cat, block) in out.chunks_exact_mut(d).enumerate() {
                    let resid = f64::from(u8::from(k == cat + 1)) - probs[cat + 1];
                    block[0] = resid;
                    for (o, xj) in block[1..].iter_mut().zip(x) {
                        *o = resid * xj;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn log_density(&self, x: &[f64], y: f64) -> f64 {
        match self.family {
            DensityFamily::Normal => {
                let s2 = self.variance();
                let r = y - self.normal_mean(x);
                -0.5 * (2.0 * std::f64::consts::PI * s2).ln() - 0.5 * r * r / s2
            }
            DensityFamily::Multinomial => match self.category_index(y) {
                Some(k) => self.category_probs(x)[k].ln(),
                None => f64::NEG_INFINITY,
            },
        }
    }

    /// Design-weighted pseudo-score Σ_A π⁻¹ ∂log f/∂β.
    pub fn weighted_score(&self, a: &ProbabilitySample, pop: &FinitePopulation) -> Result<Vec<f64>> {
        let mut total = vec![0.0; self.dim()];
        let mut s = vec![0.0; self.dim()];
        for ((&i, &y), &p) in a.indices().iter().zip(a.outcomes()).zip(a.inclusion_probs()) {
            self.score_into(pop.row(i), y, &mut s)?;
            for (t, v) in total.iter_mut().zip(&s) {
                *t += v / p;
            }
        }
        Ok(total)
    }
}

/// Fits f(y | x; β) by maximising Σ_A π⁻¹ log f(y_i | x_i; β).
pub fn fit_outcome_density(
    a: &ProbabilitySample,
    pop: &FinitePopulation,
    family: DensityFamily,
) -> Result<OutcomeDensityFit> {
    match family {
        DensityFamily::Normal => fit_normal(a, pop),
        DensityFamily::Multinomial => fit_multinomial(a, pop),
    }
}

fn design_rows(a: &ProbabilitySample, pop: &FinitePopulation) -> DMatrix<f64> {
    let d = pop.dim() + 1;
    DMatrix::from_fn(a.len(), d, |r, c| if c == 0 { 1.0 } else { pop.row(a.indices()[r])[c - 1] })
}

fn fit_normal(a: &ProbabilitySample, pop: &FinitePopulation) -> Result<OutcomeDensityFit> {
    let p = pop.dim();
    let dim = p + 2;
    if a.len() <= dim {
        return Err(Error::Precondition(format!(
            "normal density needs n_A > {dim}, got {}",
            a.len()
        )));
    }
    let x = design_rows(a, pop);
    let w = a.design_weights();
    let y = a.outcomes();
    let mut xtwx = DMatrix::zeros(p + 1, p + 1);
    let mut xtwy = DVector::zeros(p + 1);
    for r in 0..a.len() {
        let row = x.row(r);
        for i in 0..=p {
            xtwy[i] += w[r] * row[i] * y[r];
            for j in 0..=p {
                xtwx[(i, j)] += w[r] * row[i] * row[j];
            }
        }
    }
    if linalg::reciprocal_condition(&xtwx) < 1e-12 {
        return Err(Error::RankDeficient("outcome density"));
    }
    let gamma = linalg::solve(&xtwx, &xtwy, "outcome density normal equations")?;
    let wsum: f64 = w.iter().sum();
    let mut rss = 0.0;
    let mut yss = 0.0;
    for r in 0..a.len() {
        let fitted = (x.row(r) * &gamma)[(0, 0)];
        rss += w[r] * (y[r] - fitted).powi(2);
        yss += w[r] * y[r] * y[r];
    }
    let sigma2 = rss / wsum;
    let mut fit = OutcomeDensityFit::normal(gamma.iter().copied().collect(), sigma2)?;
    fit.degenerate = sigma2 <= 1e-20 * (yss / wsum).max(1.0);
    if !fit.degenerate {
        fit.score_norm = linalg::max_abs(&fit.weighted_score(a, pop)?);
    }
    Ok(fit)
}

fn fit_multinomial(a: &ProbabilitySample, pop: &FinitePopulation) -> Result<OutcomeDensityFit> {
    let p = pop.dim();
    let d = p + 1;
    let mut categories: Vec<f64> = a.outcomes().to_vec();
    categories.sort_by(f64::total_cmp);
    categories.dedup();
    let c = categories.len();
    let dim = (c - 1) * d;
    if a.len() <= dim {
        return Err(Error::Precondition(format!(
            "multinomial density needs n_A > {dim}, got {}",
            a.len()
        )));
    }
    let x = design_rows(a, pop);
    let w = a.design_weights();
    let labels: Vec<usize> = a
        .outcomes()
        .iter()
        .map(|y| categories.iter().position(|c| c == y).expect("category present"))
        .collect();
    let mut gram = DMatrix::zeros(d, d);
    for (r, wr) in w.iter().enumerate() {
        let row = x.row(r);
        gram += *wr * row.transpose() * row;
    }
    if linalg::reciprocal_condition(&gram) < 1e-12 {
        return Err(Error::RankDeficient("outcome density"));
    }
    let template = OutcomeDensityFit::multinomial(categories.clone(), vec![0.0; dim], p)?;
    let opts = NewtonOptions {
        separation_norm: 1e3,
        ..NewtonOptions::default()
    };
    let mut probs = vec![0.0; c];
    let res = linalg::newton_maximize(vec![0.0; dim], opts, "multinomial outcome density", |beta| {
        let fit = template.with_params(beta);
        let mut value = 0.0;
        let mut grad = DVector::zeros(dim);
        let mut hess = DMatrix::zeros(dim, dim);
        for r in 0..a.len() {
            let row: Vec<f64> = x.row(r).iter().copied().collect();
            fit.category_probs_into(&row[1..], &mut probs);
            value += w[r] * probs[labels[r]].ln();
            for k in 1..c {
                let resid = f64::from(u8::from(labels[r] == k)) - probs[k];
                for i in 0..d {
                    grad[(k - 1) * d + i] += w[r] * resid * row[i];
                }
                for l in 1..c {
                    let cov = if k == l { probs[k] * (1.0 - probs[k]) } else { -probs[k] * probs[l] };
                    for i in 0..d {
                        for j in 0..d {
                            hess[((k - 1) * d + i, (l - 1) * d + j)] -= w[r] * cov * row[i] * row[j];
                        }
                    }
                }
            }
        }
        Evaluation {
            value,
            gradient: grad,
            hessian: hess,
        }
    })?;
    let mut fit = template.with_params(&res.x);
    fit.score_norm = res.gradient_norm;
    Ok(fit)
}

fn check_compatible(fit: &OutcomeDensityFit, prop: &FittedPropensity, p: usize) -> Result<()> {
    if fit.covariate_dim() != p {
        return Err(Error::DimensionMismatch {
            context: "outcome density covariates",
            expected: p,
            found: fit.covariate_dim(),
        });
    }
    if prop.phi_hat.len() != prop.spec.dim() {
        return Err(Error::DimensionMismatch {
            context: "propensity coefficients",
            expected: prop.spec.dim(),
            found: prop.phi_hat.len(),
        });
    }
    let needed = prop
        .spec
        .predictors()
        .iter()
        .filter_map(|t| match t {
            crate::propensity::Term::Covariate(j) => Some(j + 1),
            crate::propensity::Term::Outcome => None,
        })
        .max()
        .unwrap_or(0);
    if needed > p {
        return Err(Error::DimensionMismatch {
            context: "propensity model covariates",
            expected: needed,
            found: p,
        });
    }
    Ok(())
}

/// π̃(x) for already validated inputs.
#[inline]
pub fn smoothed_propensity_unchecked(
    fit: &OutcomeDensityFit,
    prop: &FittedPropensity,
    x: &[f64],
    rule: &GaussHermite,
    scratch: &mut Vec<f64>,
) -> f64 {
    let (a, b) = prop.split_linear_predictor(x);
    if b == 0.0 {
        return logistic(a);
    }
    match fit.family {
        DensityFamily::Normal => {
            let shift = a + b * fit.normal_mean(x);
            let sd = fit.variance().max(0.0).sqrt();
            if sd == 0.0 {
                return logistic(shift);
            }
            let scale = b * sd;
            rule.nodes
                .iter()
                .zip(&rule.weights)
                .map(|(z, w)| w * logistic(shift + scale * z))
                .sum()
        }
        DensityFamily::Multinomial => {
            let cats = fit.categories.as_deref().unwrap_or(&[]);
            scratch.resize(cats.len(), 0.0);
            fit.category_probs_into(x, scratch);
            scratch.iter().zip(cats).map(|(pc, c)| pc * logistic(a + b * c)).sum()
        }
    }
}

/// π̃(x; β̂, φ̂) with the default quadrature rule.
pub fn smoothed_propensity(fit: &OutcomeDensityFit, prop: &FittedPropensity, x: &[f64]) -> Result<f64> {
    smoothed_propensity_with(fit, prop, x, GaussHermite::standard())
}

pub fn smoothed_propensity_with(
    fit: &OutcomeDensityFit,
    prop: &FittedPropensity,
    x: &[f64],
    rule: &GaussHermite,
) -> Result<f64> {
    check_compatible(fit, prop, x.len())?;
    Ok(smoothed_propensity_unchecked(fit, prop, x, rule, &mut Vec::new()))
}

/// N⁻¹ Σ_i π̃(x_i; β̂, φ̂) over every population row.
pub fn smoothed_propensity_population_mean(
    fit: &OutcomeDensityFit,
    prop: &FittedPropensity,
    pop: &FinitePopulation,
) -> Result<f64> {
    smoothed_propensity_population_mean_with(fit, prop, pop, GaussHermite::standard())
}

pub fn smoothed_propensity_population_mean_with(
    fit: &OutcomeDensityFit,
    prop: &FittedPropensity,
    pop: &FinitePopulation,
    rule: &GaussHermite,
) -> Result<f64> {
    check_compatible(fit, prop, pop.dim())?;
    let mut scratch = Vec::new();
    let total: f64 = pop
        .rows()
        .map(|x| smoothed_propensity_unchecked(fit, prop, x, rule, &mut scratch))
        .sum();
    Ok(total / pop.size() as f64)
}
