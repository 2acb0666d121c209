//! Comparison estimators: design-based HT and GREG, and inverse-propensity
//! weighting of the non-probability sample under logistic selection fits.

use nalgebra::{DMatrix, DVector};

use crate::data::{FinitePopulation, NonProbabilitySample, ProbabilitySample};
use crate::error::{Error, Result};
use crate::linalg::{self, logistic, Evaluation, NewtonOptions};

/// Hájek-form estimate Σ w y / Σ w with the weights that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedEstimate {
    pub method: String,
    /// One weight per unit of the weighted sample, in sample order.
    pub weights: Vec<f64>,
    pub estimate: f64,
    /// Fitted selection-model coefficients over (1, xᵀ), when a model was fit.
    pub phi_hat: Option<Vec<f64>>,
    /// Max-norm of the likelihood gradient at `phi_hat`.
    pub score_norm: f64,
}

impl WeightedEstimate {
    /// Hájek mean over the units flagged in `indicator` (sample order).
    pub fn domain_mean(&self, y: &[f64], indicator: &[bool]) -> Result<f64> {
        let (mut num, mut den) = (0.0, 0.0);
        for ((w, y), &d) in self.weights.iter().zip(y).zip(indicator) {
            if d {
                num += w * y;
                den += w;
            }
        }
        if den == 0.0 {
            return Err(Error::Precondition("domain has no sampled units".into()));
        }
        Ok(num / den)
    }
}

/// Σ w y / Σ w.
pub fn hajek_mean(weights: &[f64], y: &[f64]) -> Result<f64> {
    if weights.is_empty() || weights.len() != y.len() {
        return Err(Error::Precondition("Hájek mean needs matching, non-empty weights and outcomes".into()));
    }
    let den: f64 = weights.iter().sum();
    if !(den > 0.0) {
        return Err(Error::Precondition("Hájek weights must have a positive total".into()));
    }
    Ok(weights.iter().zip(y).map(|(w, y)| w * y).sum::<f64>() / den)
}

/// Design-weighted mean of the probability sample; the plain sample mean under SRSWOR.
pub fn estimate_ht(a: &ProbabilitySample) -> Result<WeightedEstimate> {
    let weights = a.design_weights();
    let estimate = hajek_mean(&weights, a.outcomes())?;
    Ok(WeightedEstimate {
        method: "HT".into(),
        weights,
        estimate,
        phi_hat: None,
        score_norm: 0.0,
    })
}

/// Regression estimator with a design-weighted least-squares fit on (1, xᵀ).
#[derive(Debug, Clone, PartialEq)]
pub struct GregFit {
    pub gamma: Vec<f64>,
    pub estimate: f64,
}

impl GregFit {
    #[inline]
    fn fitted(&self, x: &[f64]) -> f64 {
        self.gamma[0] + linalg::dot(&self.gamma[1..], x)
    }

    /// GREG domain mean: population fitted values over the domain plus the
    /// design-weighted residual correction from A ∩ d.
    pub fn domain_mean(
        &self,
        pop: &FinitePopulation,
        a: &ProbabilitySample,
        population_indicator: &[bool],
    ) -> Result<f64> {
        let mut total = 0.0;
        let mut size = 0usize;
        for (x, &d) in pop.rows().zip(population_indicator) {
            if d {
                total += self.fitted(x);
                size += 1;
            }
        }
        if size == 0 {
            return Err(Error::Precondition("domain is empty in the population".into()));
        }
        for ((&i, &y), &p) in a.indices().iter().zip(a.outcomes()).zip(a.inclusion_probs()) {
            if population_indicator[i] {
                total += (y - self.fitted(pop.row(i))) / p;
            }
        }
        Ok(total / size as f64)
    }
}

pub fn estimate_greg(pop: &FinitePopulation, a: &ProbabilitySample) -> Result<GregFit> {
    let d = pop.dim() + 1;
    let mut xtwx = DMatrix::zeros(d, d);
    let mut xtwy = DVector::zeros(d);
    let mut row = vec![1.0; d];
    for ((&i, &y), &p) in a.indices().iter().zip(a.outcomes()).zip(a.inclusion_probs()) {
        row[1..].copy_from_slice(pop.row(i));
        let w = 1.0 / p;
        for r in 0..d {
            xtwy[r] += w * row[r] * y;
            for c in 0..d {
                xtwx[(r, c)] += w * row[r] * row[c];
            }
        }
    }
    if linalg::reciprocal_condition(&xtwx) < 1e-12 {
        return Err(Error::RankDeficient("GREG"));
    }
    let gamma: Vec<f64> = linalg::solve(&xtwx, &xtwy, "GREG normal equations")?.iter().copied().collect();
    let means = pop.covariate_means();
    let estimate = gamma[0] + linalg::dot(&gamma[1..], &means);
    Ok(GregFit { gamma, estimate })
}

/// Which pseudo-likelihood a selection fit maximises.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Likelihood {
    /// Σ_B log π + Σ_A w* log(1 − π).
    Rdw { a_factor: f64 },
    /// Σ_B logit π + Σ_A d log(1 − π).
    Clw,
    /// Σ_B log p + c Σ_A d log(1 − p).
    Alp { scale: f64 },
}

struct SelectionFit {
    phi: Vec<f64>,
    score_norm: f64,
}

fn design_row(pop: &FinitePopulation, i: usize, out: &mut [f64]) {
    out[0] = 1.0;
    out[1..].copy_from_slice(pop.row(i));
}

fn fit_selection(
    pop: &FinitePopulation,
    a: &ProbabilitySample,
    b: &NonProbabilitySample,
    kind: Likelihood,
    solver: &'static str,
) -> Result<SelectionFit> {
    if b.is_empty() {
        return Err(Error::Precondition("non-probability sample is empty".into()));
    }
    let d = pop.dim() + 1;
    let mut xb = vec![0.0; b.len() * d];
    for (k, &i) in b.indices().iter().enumerate() {
        design_row(pop, i, &mut xb[k * d..(k + 1) * d]);
    }
    let mut xa = vec![0.0; a.len() * d];
    for (k, &i) in a.indices().iter().enumerate() {
        design_row(pop, i, &mut xa[k * d..(k + 1) * d]);
    }
    let a_weights: Vec<f64> = a
        .inclusion_probs()
        .iter()
        .map(|p| {
            let dw = 1.0 / p;
            match kind {
                Likelihood::Rdw { a_factor } => dw * a_factor,
                Likelihood::Clw => dw,
                Likelihood::Alp { scale } => dw * scale,
            }
        })
        .collect();
    let res = linalg::newton_maximize(vec![0.0; d], NewtonOptions::default(), solver, |phi| {
        let mut value = 0.0;
        let mut grad = DVector::zeros(d);
        let mut hess = DMatrix::zeros(d, d);
        let mut accumulate = |x: &[f64], g: f64, h: f64| {
            for r in 0..d {
                grad[r] += g * x[r];
                for c in 0..=r {
                    hess[(r, c)] -= h * x[r] * x[c];
                }
            }
        };
        for x in xb.chunks_exact(d) {
            let eta = linalg::dot(phi, x);
            let pr = logistic(eta);
            match kind {
                Likelihood::Clw => {
                    value += eta;
                    accumulate(x, 1.0, 0.0);
                }
                _ => {
                    // log π = −log(1 + e^{−η})
                    value -= softplus(-eta);
                    accumulate(x, 1.0 - pr, pr * (1.0 - pr));
                }
            }
        }
        for (x, &w) in xa.chunks_exact(d).zip(&a_weights) {
            let eta = linalg::dot(phi, x);
            let pr = logistic(eta);
            // log(1 − π) = −log(1 + e^{η})
            value -= w * softplus(eta);
            accumulate(x, -w * pr, w * pr * (1.0 - pr));
        }
        for r in 0..d {
            for c in 0..r {
                hess[(c, r)] = hess[(r, c)];
            }
        }
        Evaluation {
            value,
            gradient: grad,
            hessian: hess,
        }
    })?;
    Ok(SelectionFit {
        phi: res.x,
        score_norm: res.gradient_norm,
    })
}

#[inline]
fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

fn weighted_over_b(
    method: &str,
    pop: &FinitePopulation,
    b: &NonProbabilitySample,
    fit: SelectionFit,
    weight: impl Fn(&[f64], &[f64]) -> f64,
) -> Result<WeightedEstimate> {
    let d = pop.dim() + 1;
    let mut row = vec![0.0; d];
    let weights: Vec<f64> = b
        .indices()
        .iter()
        .map(|&i| {
            design_row(pop, i, &mut row);
            weight(&fit.phi, &row)
        })
        .collect();
    if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
        return Err(Error::Precondition(format!("{method} produced a non-positive or non-finite weight")));
    }
    let estimate = hajek_mean(&weights, b.outcomes())?;
    Ok(WeightedEstimate {
        method: method.into(),
        weights,
        estimate,
        phi_hat: Some(fit.phi),
        score_norm: fit.score_norm,
    })
}

/// Pseudo-likelihood fit with the A term scaled by (N̂ − n_B)/N̂, weights 1/π_B.
pub fn estimate_rdw(pop: &FinitePopulation, a: &ProbabilitySample, b: &NonProbabilitySample) -> Result<WeightedEstimate> {
    let n_hat = a.design_weight_total();
    let n_b = b.len() as f64;
    if !(n_hat > n_b) {
        return Err(Error::Precondition(format!(
            "RDW needs the estimated population size ({n_hat}) to exceed n_B ({n_b})"
        )));
    }
    let kind = Likelihood::Rdw {
        a_factor: (n_hat - n_b) / n_hat,
    };
    let fit = fit_selection(pop, a, b, kind, "RDW selection")?;
    weighted_over_b("RDW", pop, b, fit, |phi, x| 1.0 / logistic(linalg::dot(phi, x)))
}

/// Pseudo-likelihood fit with design-weighted A term, weights 1/π_B.
pub fn estimate_clw(pop: &FinitePopulation, a: &ProbabilitySample, b: &NonProbabilitySample) -> Result<WeightedEstimate> {
    let fit = fit_selection(pop, a, b, Likelihood::Clw, "CLW selection")?;
    weighted_over_b("CLW", pop, b, fit, |phi, x| 1.0 / logistic(linalg::dot(phi, x)))
}

/// Logistic model for the selection odds, weights (1 − p)/p.
pub fn estimate_alp(pop: &FinitePopulation, a: &ProbabilitySample, b: &NonProbabilitySample) -> Result<WeightedEstimate> {
    let fit = fit_selection(pop, a, b, Likelihood::Alp { scale: 1.0 }, "ALP selection")?;
    weighted_over_b("ALP", pop, b, fit, |phi, x| (-linalg::dot(phi, x)).exp())
}

/// Same fit as ALP, weights 1/p.
pub fn estimate_fdw(pop: &FinitePopulation, a: &ProbabilitySample, b: &NonProbabilitySample) -> Result<WeightedEstimate> {
    let fit = fit_selection(pop, a, b, Likelihood::Alp { scale: 1.0 }, "FDW selection")?;
    weighted_over_b("FDW", pop, b, fit, |phi, x| 1.0 / logistic(linalg::dot(phi, x)))
}

/// ALP fit with the A term scaled by n_B / Σ_A d; weights exp(xᵀφ̂₁) with the
/// intercept left out.
pub fn estimate_alp_s(pop: &FinitePopulation, a: &ProbabilitySample, b: &NonProbabilitySample) -> Result<WeightedEstimate> {
    let scale = b.len() as f64 / a.design_weight_total();
    let fit = fit_selection(pop, a, b, Likelihood::Alp { scale }, "ALP_s selection")?;
    weighted_over_b("ALP_s", pop, b, fit, |phi, x| linalg::dot(&phi[1..], &x[1..]).exp())
}

/// ALP and FDW share one selection fit; returns both.
pub fn estimate_alp_and_fdw(
    pop: &FinitePopulation,
    a: &ProbabilitySample,
    b: &NonProbabilitySample,
) -> Result<(WeightedEstimate, WeightedEstimate)> {
    let fit = fit_selection(pop, a, b, Likelihood::Alp { scale: 1.0 }, "ALP selection")?;
    let copy = SelectionFit {
        phi: fit.phi.clone(),
        score_norm: fit.score_norm,
    };
    let alp = weighted_over_b("ALP", pop, b, fit, |phi, x| (-linalg::dot(phi, x)).exp())?;
    let fdw = weighted_over_b("FDW", pop, b, copy, |phi, x| 1.0 / logistic(linalg::dot(phi, x)))?;
    Ok((alp, fdw))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_population(n: usize) -> FinitePopulation {
        let rows: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64 / n as f64, ((i * 7) % 5) as f64]).collect();
        FinitePopulation::from_rows(&rows).unwrap()
    }

    #[test]
    fn ht_constant_and_census() {
        let a = ProbabilitySample::srswor(vec![0, 3, 5], vec![2.5; 3], 10).unwrap();
        assert_eq!(estimate_ht(&a).unwrap().estimate, 2.5);
        let y = [1.0, 2.0, 4.0, 7.0];
        let census = ProbabilitySample::srswor((0..4).collect(), y.to_vec(), 4).unwrap();
        assert_eq!(estimate_ht(&census).unwrap().estimate, 3.5);
    }

    #[test]
    fn greg_reproduces_linear_outcome() {
        let pop = line_population(50);
        let y: Vec<f64> = pop.rows().map(|x| 2.0 - x[0] + 0.5 * x[1]).collect();
        let theta = y.iter().sum::<f64>() / 50.0;
        let idx: Vec<usize> = (0..50).step_by(4).collect();
        let ys = idx.iter().map(|&i| y[i]).collect();
        let a = ProbabilitySample::srswor(idx, ys, 50).unwrap();
        let g = estimate_greg(&pop, &a).unwrap();
        assert!((g.estimate - theta).abs() < 1e-12);
        let all = vec![true; 50];
        assert!((g.domain_mean(&pop, &a, &all).unwrap() - theta).abs() < 1e-12);
    }

    #[test]
    fn hajek_is_scale_invariant() {
        let w = [0.3, 1.2, 4.0];
        let y = [1.0, -2.0, 0.5];
        let scaled: Vec<f64> = w.iter().map(|v| v * 7.3).collect();
        assert!((hajek_mean(&w, &y).unwrap() - hajek_mean(&scaled, &y).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn softplus_matches_direct_form() {
        for t in [-30.0, -1.0, 0.0, 2.0, 40.0] {
            let direct = (1.0 + f64::exp(t)).ln();
            assert!((softplus(t) - direct).abs() < 1e-12 * direct.max(1.0));
        }
    }
}
