//! Linearised sandwich variance for (β̂, λ̂, θ̂) from the stacked estimating
//! system, and Wald intervals.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{Design, EstimateWithSE, FinitePopulation, NonProbabilitySample, ProbabilitySample};
use crate::el::{ConstraintLabel, MelEstimate};
use crate::error::{Error, Result};

/// The stacked system evaluated at the estimates.
///
/// Parameters are ordered (β, λ, θ); β is absent when no candidate model
/// enters the calibration.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedSystem {
    pub g_value: Vec<f64>,
    /// ∂g/∂(β, λ, θ)ᵀ by central differences.
    pub jacobian: DMatrix<f64>,
    pub vg: DMatrix<f64>,
    pub beta_dim: usize,
    pub q: usize,
}

impl StackedSystem {
    pub fn dim(&self) -> usize {
        self.beta_dim + self.q + 1
    }
}

struct Evaluator<'a> {
    pop: &'a FinitePopulation,
    a: &'a ProbabilitySample,
    b: &'a NonProbabilitySample,
    est: &'a MelEstimate,
    beta_dim: usize,
    q: usize,
    /// Constraint index → candidate index for propensity constraints.
    propensity_slot: Vec<Option<usize>>,
}

impl<'a> Evaluator<'a> {
    fn targets(&self, beta: &[f64]) -> Result<Vec<f64>> {
        let sys = &self.est.system;
        let mut t = sys.targets().to_vec();
        if self.beta_dim == 0 {
            return Ok(t);
        }
        let fit = self.est.density.as_ref().expect("density present with β").with_params(beta);
        for (j, slot) in self.propensity_slot.iter().enumerate() {
            if let Some(k) = slot {
                t[j] = self.est.memo.target(&fit, &self.est.propensities[*k], self.pop)?;
            }
        }
        Ok(t)
    }

    fn split<'p>(&self, params: &'p [f64]) -> (&'p [f64], &'p [f64], f64) {
        let (beta, rest) = params.split_at(self.beta_dim);
        let (lambda, theta) = rest.split_at(self.q);
        (beta, lambda, theta[0])
    }

    fn g(&self, params: &[f64]) -> Result<Vec<f64>> {
        let (beta, lambda, theta) = self.split(params);
        let mut out = Vec::with_capacity(params.len());
        if self.beta_dim > 0 {
            let fit = self.est.density.as_ref().expect("density present with β").with_params(beta);
            out.extend(fit.weighted_score(self.a, self.pop)?);
        }
        let t = self.targets(beta)?;
        let sys = &self.est.system;
        let mut cal = vec![0.0; self.q];
        let mut th = 0.0;
        let mut v = vec![0.0; self.q];
        for (i, y) in self.b.outcomes().iter().enumerate() {
            for ((vj, uj), tj) in v.iter_mut().zip(sys.row(i)).zip(&t) {
                *vj = uj - tj;
            }
            let d = 1.0 + crate::linalg::dot(lambda, &v);
            for (c, vj) in cal.iter_mut().zip(&v) {
                *c += vj / d;
            }
            th += (y - theta) / d;
        }
        out.extend(cal);
        out.push(th);
        Ok(out)
    }

    fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.beta_dim + self.q + 1);
        if let Some(d) = &self.est.density {
            if self.beta_dim > 0 {
                p.extend_from_slice(&d.beta_hat);
            }
        }
        p.extend_from_slice(&self.est.solution.lambda);
        p.push(self.est.solution.theta_hat);
        p
    }
}

/// Central-difference step for a parameter of magnitude `x`.
#[inline]
pub fn fd_step(x: f64) -> f64 {
    1e-5 * x.abs().max(1.0)
}

fn evaluator<'a>(
    pop: &'a FinitePopulation,
    a: &'a ProbabilitySample,
    b: &'a NonProbabilitySample,
    est: &'a MelEstimate,
) -> Result<Evaluator<'a>> {
    if !est.solution.converged {
        return Err(Error::Precondition("variance needs a converged EL solution".into()));
    }
    if b.len() != est.system.rows() {
        return Err(Error::DimensionMismatch {
            context: "non-probability sample vs calibration system",
            expected: est.system.rows(),
            found: b.len(),
        });
    }
    let propensity_slot: Vec<Option<usize>> = est
        .system
        .labels()
        .iter()
        .map(|l| match l {
            ConstraintLabel::Propensity(name) => est.propensities.iter().position(|p| &p.spec.name == name),
            ConstraintLabel::Covariate(_) => None,
        })
        .collect();
    let beta_dim = if est.propensities.is_empty() {
        0
    } else {
        est.density
            .as_ref()
            .ok_or_else(|| Error::Precondition("candidate calibration without a density fit".into()))?
            .dim()
    };
    Ok(Evaluator {
        pop,
        a,
        b,
        est,
        beta_dim,
        q: est.system.q(),
        propensity_slot,
    })
}

/// Evaluates g, its Jacobian and the design variance of g at the estimates.
pub fn build_stacked_system(
    pop: &FinitePopulation,
    a: &ProbabilitySample,
    b: &NonProbabilitySample,
    est: &MelEstimate,
) -> Result<StackedSystem> {
    let ev = evaluator(pop, a, b, est)?;
    let params = ev.params();
    let dim = params.len();
    let g_value = ev.g(&params)?;

    let mut jacobian = DMatrix::zeros(dim, dim);
    let mut work = params.clone();
    for j in 0..dim {
        let h = fd_step(params[j]);
        work[j] = params[j] + h;
        let up = ev.g(&work)?;
        work[j] = params[j] - h;
        let down = ev.g(&work)?;
        work[j] = params[j];
        for r in 0..dim {
            jacobian[(r, j)] = (up[r] - down[r]) / (2.0 * h);
        }
    }

    let mut vg = DMatrix::zeros(dim, dim);
    if ev.beta_dim > 0 {
        let fit = est.density.as_ref().expect("density present with β");
        let scores = per_unit_scores(fit, pop, a)?;
        let block = design_covariance(pop, a, &scores, ev.beta_dim)?;
        vg.view_mut((0, 0), (ev.beta_dim, ev.beta_dim)).copy_from(&block);
    }
    let (_, lambda, theta) = ev.split(&params);
    let t = est.system.targets();
    let m = ev.q + 1;
    let off = ev.beta_dim;
    let mut hvec = vec![0.0; m];
    for (i, y) in b.outcomes().iter().enumerate() {
        let row = est.system.row(i);
        let mut d = 1.0;
        for ((uj, tj), lj) in row.iter().zip(t).zip(lambda) {
            d += lj * (uj - tj);
        }
        for (hj, (uj, tj)) in hvec.iter_mut().zip(row.iter().zip(t)) {
            *hj = (uj - tj) / d;
        }
        hvec[m - 1] = (y - theta) / d;
        for r in 0..m {
            for c in 0..m {
                vg[(off + r, off + c)] += hvec[r] * hvec[c];
            }
        }
    }
    Ok(StackedSystem {
        g_value,
        jacobian,
        vg,
        beta_dim: ev.beta_dim,
        q: ev.q,
    })
}

fn per_unit_scores(
    fit: &crate::density::OutcomeDensityFit,
    pop: &FinitePopulation,
    a: &ProbabilitySample,
) -> Result<Vec<Vec<f64>>> {
    a.indices()
        .iter()
        .zip(a.outcomes())
        .map(|(&i, &y)| {
            let mut s = vec![0.0; fit.dim()];
            fit.score_into(pop.row(i), y, &mut s)?;
            Ok(s)
        })
        .collect()
}

/// Design-based covariance of the HT total Σ_A π⁻¹ s_i under (stratified) SRSWOR.
pub fn design_covariance(
    pop: &FinitePopulation,
    a: &ProbabilitySample,
    values: &[Vec<f64>],
    dim: usize,
) -> Result<DMatrix<f64>> {
    let groups: Vec<(usize, usize, Vec<usize>)> = match a.design() {
        Design::Srswor {
            sample_size,
            population_size,
        } => vec![(*sample_size, *population_size, (0..a.len()).collect())],
        Design::StratifiedSrswor { strata } => {
            let labels = pop
                .strata()
                .ok_or_else(|| Error::Precondition("stratified design without population strata".into()))?;
            let mut members: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
            for (k, &i) in a.indices().iter().enumerate() {
                members.entry(labels[i]).or_default().push(k);
            }
            members
                .into_iter()
                .map(|(label, units)| {
                    let s = strata
                        .iter()
                        .find(|s| s.label == label)
                        .ok_or_else(|| Error::Precondition(format!("stratum {label} missing from the design")))?;
                    Ok((s.sample_size, s.population_size, units))
                })
                .collect::<Result<_>>()?
        }
    };
    let mut cov = DMatrix::zeros(dim, dim);
    for (n_h, pop_h, units) in groups {
        if units.len() < 2 {
            return Err(Error::Precondition("design variance needs at least two sampled units per stratum".into()));
        }
        let nf = units.len() as f64;
        let mut mean = DVector::zeros(dim);
        for &k in &units {
            mean += DVector::from_column_slice(&values[k]);
        }
        mean /= nf;
        let mut s2 = DMatrix::zeros(dim, dim);
        for &k in &units {
            let dev = DVector::from_column_slice(&values[k]) - &mean;
            s2 += &dev * dev.transpose();
        }
        s2 /= nf - 1.0;
        let big = pop_h as f64;
        let f = n_h as f64 / big;
        cov += s2 * (big * big * (1.0 - f) / n_h as f64);
    }
    Ok(cov)
}

/// V̂ = Î⁻¹ V̂_g Î⁻ᵀ.
pub fn sandwich_variance(sys: &StackedSystem) -> Result<DMatrix<f64>> {
    let inv = crate::linalg::inverse(&sys.jacobian, "stacked Jacobian")?;
    let v = &inv * &sys.vg * inv.transpose();
    Ok((&v + v.transpose()) * 0.5)
}

/// Two-sided Wald interval at confidence `level`.
pub fn wald_interval(theta_hat: f64, var_theta: f64, level: f64) -> Result<(f64, f64)> {
    if !(var_theta >= 0.0) {
        return Err(Error::Precondition(format!("variance must be non-negative, got {var_theta}")));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Precondition(format!("confidence level must lie in (0, 1), got {level}")));
    }
    let z = Normal::standard().inverse_cdf(0.5 + 0.5 * level);
    let half = z * var_theta.sqrt();
    Ok((theta_hat - half, theta_hat + half))
}

/// Analytic partial derivatives of the θ block: (∂/∂λ, ∂/∂θ).
pub fn analytic_theta_row(b: &NonProbabilitySample, est: &MelEstimate) -> (Vec<f64>, f64) {
    let sys = &est.system;
    let lambda = &est.solution.lambda;
    let theta = est.solution.theta_hat;
    let mut d_lambda = vec![0.0; sys.q()];
    let mut d_theta = 0.0;
    for (i, y) in b.outcomes().iter().enumerate() {
        let row = sys.row(i);
        let mut d = 1.0;
        for ((uj, tj), lj) in row.iter().zip(sys.targets()).zip(lambda) {
            d += lj * (uj - tj);
        }
        d_theta -= 1.0 / d;
        for (o, (uj, tj)) in d_lambda.iter_mut().zip(row.iter().zip(sys.targets())) {
            *o -= (y - theta) * (uj - tj) / (d * d);
        }
    }
    (d_lambda, d_theta)
}

/// Point estimate, sandwich standard error and 95% Wald interval.
pub fn mel_estimate_with_se(
    pop: &FinitePopulation,
    a: &ProbabilitySample,
    b: &NonProbabilitySample,
    est: &MelEstimate,
    method: &str,
) -> Result<EstimateWithSE> {
    let sys = build_stacked_system(pop, a, b, est)?;
    let v = sandwich_variance(&sys)?;
    let var = v[(sys.dim() - 1, sys.dim() - 1)];
    if !(var >= 0.0) {
        return Err(Error::Precondition(format!("negative θ variance {var}")));
    }
    let theta = est.solution.theta_hat;
    let (lo, hi) = wald_interval(theta, var, 0.95)?;
    Ok(EstimateWithSE {
        estimate: theta,
        std_error: var.sqrt(),
        ci_lower: lo,
        ci_upper: hi,
        method: method.into(),
    })
}
