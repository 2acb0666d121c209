//! Empirical-likelihood calibration: the dual solver and the EL_0, EL_k,
//! MEL and MEL_GREG estimators built on it.

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, Mutex};

use nalgebra::{DMatrix, DVector};

use crate::data::{FinitePopulation, NonProbabilitySample, ProbabilitySample};
use crate::density::{self, DensityFamily, OutcomeDensityFit};
use crate::error::{Error, Result};
use crate::propensity::{self, FittedPropensity, PropensityModelSpec};

/// Where a calibration constraint comes from.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum ConstraintLabel {
    /// Candidate selection model, by name.
    Propensity(String),
    /// Population mean of a covariate column, by name.
    Covariate(String),
}

impl fmt::Display for ConstraintLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConstraintLabel::Propensity(name) => write!(f, "propensity:{name}"),
            ConstraintLabel::Covariate(name) => write!(f, "covariate:{name}"),
        }
    }
}

/// Constraint values `u` (n_B × q, row-major) and their targets.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSystem {
    u: Vec<f64>,
    n: usize,
    targets: Vec<f64>,
    labels: Vec<ConstraintLabel>,
}

impl CalibrationSystem {
    pub fn new(u: Vec<f64>, n: usize, targets: Vec<f64>, labels: Vec<ConstraintLabel>) -> Result<Self> {
        let q = targets.len();
        if labels.len() != q {
            return Err(Error::DimensionMismatch {
                context: "calibration labels",
                expected: q,
                found: labels.len(),
            });
        }
        if u.len() != n * q {
            return Err(Error::DimensionMismatch {
                context: "calibration matrix",
                expected: n * q,
                found: u.len(),
            });
        }
        if u.iter().chain(&targets).any(|v| !v.is_finite()) {
            return Err(Error::Precondition("non-finite calibration value".into()));
        }
        Ok(Self { u, n, targets, labels })
    }

    /// Single-constraint system.
    pub fn single(u: Vec<f64>, target: f64, label: ConstraintLabel) -> Result<Self> {
        let n = u.len();
        Self::new(u, n, vec![target], vec![label])
    }

    pub fn rows(&self) -> usize {
        self.n
    }

    pub fn q(&self) -> usize {
        self.targets.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let q = self.q();
        &self.u[i * q..(i + 1) * q]
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn labels(&self) -> &[ConstraintLabel] {
        &self.labels
    }

    /// Per-constraint Σ_i p_i u_ij − t_j.
    pub fn residuals(&self, p: &[f64]) -> Vec<f64> {
        let q = self.q();
        let mut out: Vec<f64> = self.targets.iter().map(|t| -t).collect();
        for (i, pi) in p.iter().enumerate() {
            for (o, v) in out.iter_mut().zip(&self.u[i * q..(i + 1) * q]) {
                *o += pi * v;
            }
        }
        out
    }

    /// max_j |Σ_i p_i u_ij − t_j|.
    pub fn residual(&self, p: &[f64]) -> f64 {
        crate::linalg::max_abs(&self.residuals(p))
    }
}

/// Dual solver settings.
#[derive(Debug, Clone, Copy)]
pub struct DualOptions {
    /// Bound on the calibration residual max-norm.
    pub tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
    /// Iterations without a gradient improvement before giving up.
    pub stall_iterations: usize,
    /// Smallest admissible denominator 1 + λᵀ(u_i − t).
    pub denominator_floor: f64,
    /// Mean log-denominator beyond which the dual is taken as unbounded.
    pub unbounded_level: f64,
}

impl Default for DualOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 200,
            max_halvings: 30,
            stall_iterations: 20,
            denominator_floor: 1e-10,
            unbounded_level: 10.0,
        }
    }
}

/// Multipliers and weights solving the calibration problem.
#[derive(Debug, Clone, PartialEq)]
pub struct DualSolution {
    /// Multipliers on the original constraint scale.
    pub lambda: Vec<f64>,
    pub p: Vec<f64>,
    pub iterations: usize,
    pub constraint_residual: f64,
}

pub fn el_dual_solve(sys: &CalibrationSystem) -> Result<DualSolution> {
    el_dual_solve_with(sys, DualOptions::default())
}

/// Maximises Σ log p_i subject to Σ p_i = 1 and Σ p_i u_i = t through the
/// concave dual Σ log(1 + λᵀ(u_i − t)).
pub fn el_dual_solve_with(sys: &CalibrationSystem, opts: DualOptions) -> Result<DualSolution> {
    let n = sys.rows();
    let q = sys.q();
    if n == 0 {
        return Err(Error::Precondition("calibration over an empty sample".into()));
    }
    let uniform = || vec![1.0 / n as f64; n];
    if q == 0 {
        return Ok(DualSolution {
            lambda: Vec::new(),
            p: uniform(),
            iterations: 0,
            constraint_residual: 0.0,
        });
    }

    // center at the targets, scale each column to unit max-abs
    let mut active = Vec::with_capacity(q);
    let mut scale = Vec::with_capacity(q);
    for j in 0..q {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for i in 0..n {
            let v = sys.u[i * q + j] - sys.targets[j];
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let s = lo.abs().max(hi.abs());
        if s == 0.0 {
            continue;
        }
        if !(lo < 0.0 && hi > 0.0) {
            return Err(Error::Infeasible {
                label: sys.labels[j].to_string(),
            });
        }
        active.push(j);
        scale.push(s);
    }
    let m = active.len();
    if m == 0 {
        return Ok(DualSolution {
            lambda: vec![0.0; q],
            p: uniform(),
            iterations: 0,
            constraint_residual: sys.residual(&uniform()),
        });
    }
    let mut w = vec![0.0; n * m];
    for i in 0..n {
        for (k, (&j, &s)) in active.iter().zip(&scale).enumerate() {
            w[i * m + k] = (sys.u[i * q + j] - sys.targets[j]) / s;
        }
    }

    struct State {
        value: f64,
        grad: DVector<f64>,
        inv_sum: f64,
    }
    let evaluate = |lam: &[f64]| -> Option<State> {
        let mut value = 0.0;
        let mut grad = DVector::zeros(m);
        let mut inv_sum = 0.0;
        for wi in w.chunks_exact(m) {
            let d = 1.0 + lam.iter().zip(wi).map(|(a, b)| a * b).sum::<f64>();
            if !(d > opts.denominator_floor) {
                return None;
            }
            value += d.ln();
            let r = 1.0 / d;
            inv_sum += r;
            for (g, x) in grad.iter_mut().zip(wi) {
                *g += x * r;
            }
        }
        Some(State { value, grad, inv_sum })
    };
    let hessian = |lam: &[f64]| -> DMatrix<f64> {
        let mut h = DMatrix::zeros(m, m);
        for wi in w.chunks_exact(m) {
            let d = 1.0 + lam.iter().zip(wi).map(|(a, b)| a * b).sum::<f64>();
            let r2 = 1.0 / (d * d);
            for a in 0..m {
                for b in 0..=a {
                    h[(a, b)] += wi[a] * wi[b] * r2;
                }
            }
        }
        for a in 0..m {
            for b in 0..a {
                h[(b, a)] = h[(a, b)];
            }
        }
        h
    };
    let unscaled_residual = |st: &State| -> f64 {
        st.grad
            .iter()
            .zip(&scale)
            .fold(0.0_f64, |acc, (g, s)| acc.max((g * s / st.inv_sum).abs()))
    };
    let worst_label = |lam: &[f64]| -> String {
        let k = lam
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .map_or(0, |(k, _)| k);
        sys.labels[active[k]].to_string()
    };

    let nf = n as f64;
    let mut lam = vec![0.0; m];
    let mut state = evaluate(&lam).expect("unit denominators at the origin");
    let mut best_grad = f64::INFINITY;
    let mut stall = 0;
    for iter in 0..=opts.max_iter {
        let resid = unscaled_residual(&state);
        if resid <= opts.tol && (state.inv_sum / nf - 1.0).abs() <= 1e-8 {
            let total = state.inv_sum;
            let p: Vec<f64> = w
                .chunks_exact(m)
                .map(|wi| 1.0 / (1.0 + lam.iter().zip(wi).map(|(a, b)| a * b).sum::<f64>()) / total)
                .collect();
            let mut lambda = vec![0.0; q];
            for ((&j, &s), l) in active.iter().zip(&scale).zip(&lam) {
                lambda[j] = l / s;
            }
            let constraint_residual = sys.residual(&p);
            return Ok(DualSolution {
                lambda,
                p,
                iterations: iter,
                constraint_residual,
            });
        }
        if state.value / nf > opts.unbounded_level {
            return Err(Error::Infeasible { label: worst_label(&lam) });
        }
        if iter == opts.max_iter {
            break;
        }
        let gnorm = state.grad.amax();
        if gnorm < best_grad {
            best_grad = gnorm;
            stall = 0;
        } else {
            stall += 1;
            if stall >= opts.stall_iterations {
                return Err(Error::Infeasible { label: worst_label(&lam) });
            }
        }
        let h = hessian(&lam);
        let step = match h.clone().cholesky() {
            Some(ch) => ch.solve(&state.grad),
            None => crate::linalg::solve(&h, &state.grad, "EL dual Hessian")?,
        };
        let slack = 1e-12 * (1.0 + state.value.abs());
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..opts.max_halvings {
            let trial: Vec<f64> = lam.iter().zip(step.iter()).map(|(l, d)| l + t * d).collect();
            if let Some(next) = evaluate(&trial) {
                let improves = next.value > state.value
                    || (next.value >= state.value - slack && next.grad.amax() < gnorm);
                if improves {
                    accepted = Some((trial, next));
                    break;
                }
            }
            t *= 0.5;
        }
        match accepted {
            Some((trial, next)) => {
                lam = trial;
                state = next;
            }
            None => return Err(Error::Infeasible { label: worst_label(&lam) }),
        }
    }
    Err(Error::NonConvergence {
        solver: "EL dual",
        iterations: opts.max_iter,
        residual: unscaled_residual(&state),
    })
}

/// Calibrated weights and the profiled point estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct ELSolution {
    pub p: Vec<f64>,
    pub lambda: Vec<f64>,
    pub theta_hat: f64,
    pub converged: bool,
    pub constraint_residual: f64,
    pub iterations: usize,
}

impl ELSolution {
    fn from_dual(dual: DualSolution, y: &[f64]) -> Self {
        let theta_hat = dual.p.iter().zip(y).map(|(p, y)| p * y).sum();
        Self {
            p: dual.p,
            lambda: dual.lambda,
            theta_hat,
            converged: true,
            constraint_residual: dual.constraint_residual,
            iterations: dual.iterations,
        }
    }
}

/// Memo of N⁻¹ Σ_i π̃(x_i; β, φ) keyed by the exact bits of (φ, β).
#[derive(Debug, Default)]
pub struct TargetMemo {
    map: Mutex<HashMap<Vec<u64>, f64>>,
}

impl TargetMemo {
    pub fn target(&self, fit: &OutcomeDensityFit, prop: &FittedPropensity, pop: &FinitePopulation) -> Result<f64> {
        let key: Vec<u64> = prop.phi_hat.iter().chain(&fit.beta_hat).map(|v| v.to_bits()).collect();
        if let Some(v) = self.map.lock().unwrap_or_else(|e| e.into_inner()).get(&key) {
            return Ok(*v);
        }
        let v = density::smoothed_propensity_population_mean(fit, prop, pop)?;
        self.map.lock().unwrap_or_else(|e| e.into_inner()).insert(key, v);
        Ok(v)
    }
}

/// A fitted EL estimator together with everything needed for its variance.
#[derive(Debug, Clone)]
pub struct MelEstimate {
    pub solution: ELSolution,
    pub system: CalibrationSystem,
    pub propensities: Vec<FittedPropensity>,
    pub density: Option<OutcomeDensityFit>,
    pub include_greg: bool,
    pub memo: Arc<TargetMemo>,
}

struct Candidate {
    fit: Result<FittedPropensity>,
    column: Vec<f64>,
    target: Result<f64>,
}

/// Per-sample work shared by every EL estimator: candidate fits, the
/// density fit and the calibration targets.
pub struct CalibrationSetup<'a> {
    pop: &'a FinitePopulation,
    b: &'a NonProbabilitySample,
    candidates: Vec<Candidate>,
    density: Option<Result<OutcomeDensityFit>>,
    covariate_means: Vec<f64>,
    memo: Arc<TargetMemo>,
}

impl<'a> CalibrationSetup<'a> {
    pub fn new(
        pop: &'a FinitePopulation,
        a: Option<&ProbabilitySample>,
        b: &'a NonProbabilitySample,
        specs: &[PropensityModelSpec],
        family: DensityFamily,
    ) -> Result<Self> {
        if b.is_empty() {
            return Err(Error::Precondition("non-probability sample is empty".into()));
        }
        if b.indices().iter().any(|&i| i >= pop.size()) {
            return Err(Error::Precondition("non-probability sample index outside the population".into()));
        }
        let density = if specs.is_empty() {
            None
        } else {
            let a = a.ok_or_else(|| Error::Precondition("candidate calibration needs a probability sample".into()))?;
            Some(density::fit_outcome_density(a, pop, family).map_err(|e| e.in_stage("density")))
        };
        let memo = Arc::new(TargetMemo::default());
        let candidates = specs
            .iter()
            .map(|spec| {
                let stage = format!("propensity:{}", spec.name);
                let fit = propensity::solve_candidate_propensity(pop, b, spec).map_err(|e| e.in_stage(stage.clone()));
                let column = match &fit {
                    Ok(f) => b
                        .indices()
                        .iter()
                        .zip(b.outcomes())
                        .map(|(&i, &y)| f.predict_unchecked(pop.row(i), y))
                        .collect(),
                    Err(_) => Vec::new(),
                };
                let target = match (&fit, density.as_ref().expect("density present with candidates")) {
                    (Err(e), _) => Err(e.clone()),
                    (_, Err(e)) => Err(e.clone()),
                    (Ok(f), Ok(d)) => memo.target(d, f, pop).map_err(|e| e.in_stage(stage)),
                };
                Candidate { fit, column, target }
            })
            .collect();
        Ok(Self {
            pop,
            b,
            candidates,
            density,
            covariate_means: pop.covariate_means(),
            memo,
        })
    }

    pub fn candidate_count(&self) -> usize {
        self.candidates.len()
    }

    pub fn candidate_fit(&self, k: usize) -> std::result::Result<&FittedPropensity, &Error> {
        self.candidates[k].fit.as_ref()
    }

    pub fn density(&self) -> Option<std::result::Result<&OutcomeDensityFit, &Error>> {
        self.density.as_ref().map(|d| d.as_ref())
    }

    /// Calibrates on the candidates in `which`, plus the covariate means when
    /// `include_greg` is set.
    pub fn solve(&self, which: &[usize], include_greg: bool) -> Result<MelEstimate> {
        let n = self.b.len();
        let mut columns: Vec<&[f64]> = Vec::new();
        let mut targets = Vec::new();
        let mut labels = Vec::new();
        let mut propensities = Vec::new();
        for &k in which {
            let c = &self.candidates[k];
            let fit = c.fit.as_ref().map_err(Clone::clone)?;
            let target = c.target.as_ref().map_err(Clone::clone)?;
            columns.push(&c.column);
            targets.push(*target);
            labels.push(ConstraintLabel::Propensity(fit.spec.name.clone()));
            propensities.push(fit.clone());
        }
        let covariate_columns: Vec<Vec<f64>> = if include_greg {
            (0..self.pop.dim())
                .map(|j| self.b.indices().iter().map(|&i| self.pop.row(i)[j]).collect())
                .collect()
        } else {
            Vec::new()
        };
        for (j, col) in covariate_columns.iter().enumerate() {
            columns.push(col);
            targets.push(self.covariate_means[j]);
            labels.push(ConstraintLabel::Covariate(self.pop.covariate_names()[j].clone()));
        }
        let q = columns.len();
        let mut u = vec![0.0; n * q];
        for (j, col) in columns.iter().enumerate() {
            for i in 0..n {
                u[i * q + j] = col[i];
            }
        }
        let system = CalibrationSystem::new(u, n, targets, labels)?;
        let dual = el_dual_solve(&system).map_err(|e| e.in_stage("calibration"))?;
        let density = if which.is_empty() {
            None
        } else {
            self.density.clone().transpose()?
        };
        Ok(MelEstimate {
            solution: ELSolution::from_dual(dual, self.b.outcomes()),
            system,
            propensities,
            density,
            include_greg,
            memo: Arc::clone(&self.memo),
        })
    }

    /// All candidates at once.
    pub fn solve_all(&self, include_greg: bool) -> Result<MelEstimate> {
        let all: Vec<usize> = (0..self.candidates.len()).collect();
        self.solve(&all, include_greg)
    }
}

/// MEL (or MEL_GREG when `include_greg`) over the given candidate models.
pub fn estimate_mel(
    pop: &FinitePopulation,
    a: &ProbabilitySample,
    b: &NonProbabilitySample,
    specs: &[PropensityModelSpec],
    family: DensityFamily,
    include_greg: bool,
) -> Result<MelEstimate> {
    CalibrationSetup::new(pop, Some(a), b, specs, family)?.solve_all(include_greg)
}

/// EL calibrated on covariate means only.
pub fn estimate_el0(pop: &FinitePopulation, b: &NonProbabilitySample) -> Result<MelEstimate> {
    CalibrationSetup::new(pop, None, b, &[], DensityFamily::Normal)?.solve(&[], true)
}

/// EL calibrated on a single candidate model.
pub fn estimate_elk(
    pop: &FinitePopulation,
    a: &ProbabilitySample,
    b: &NonProbabilitySample,
    spec: &PropensityModelSpec,
    family: DensityFamily,
) -> Result<MelEstimate> {
    estimate_mel(pop, a, b, std::slice::from_ref(spec), family, false)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn label() -> ConstraintLabel {
        ConstraintLabel::Propensity("m".into())
    }

    #[test]
    fn pre_satisfied_targets_give_uniform_weights() {
        let u = vec![1.0, 4.0, 2.0, 5.0, 3.0, 0.0];
        // column means are (2, 3)
        let sys = CalibrationSystem::new(u, 3, vec![2.0, 3.0], vec![label(), ConstraintLabel::Covariate("x1".into())]).unwrap();
        let sol = el_dual_solve(&sys).unwrap();
        for p in &sol.p {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!(sol.lambda.iter().all(|l| l.abs() < 1e-15));
    }

    #[test]
    fn target_outside_hull_is_infeasible() {
        let sys = CalibrationSystem::single(vec![1.0, 2.0, 3.0], 5.0, label()).unwrap();
        assert_eq!(el_dual_solve(&sys), Err(Error::Infeasible { label: "propensity:m".into() }));
        let edge = CalibrationSystem::single(vec![1.0, 2.0, 3.0], 3.0, label()).unwrap();
        assert!(matches!(el_dual_solve(&edge), Err(Error::Infeasible { .. })));
    }

    #[test]
    fn five_point_instance_matches_grid_oracle() {
        let u = vec![1.0, 2.0, 3.0, 4.0, 5.0];
        let sys = CalibrationSystem::single(u.clone(), 2.5, label()).unwrap();
        let sol = el_dual_solve(&sys).unwrap();
        // λ must keep 1 + λ(u_i − 2.5) > 0, i.e. λ ∈ (−1/2.5, 1/1.5); the root of
        // the monotone score is located by bisection to machine precision
        let score = |l: f64| u.iter().map(|x| (x - 2.5) / (1.0 + l * (x - 2.5))).sum::<f64>();
        let (mut lo, mut hi) = (-1.0 / 2.5 + 1e-12, 1.0 / 1.5 - 1e-12);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if score(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let l = 0.5 * (lo + hi);
        for (p, x) in sol.p.iter().zip(&u) {
            let oracle = 1.0 / (5.0 * (1.0 + l * (x - 2.5)));
            assert!((p - oracle).abs() < 1e-6, "{p} vs {oracle}");
        }
        assert!((sol.p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(sol.constraint_residual <= 1e-10);
    }

    #[test]
    fn zero_constraints_uniform() {
        let sys = CalibrationSystem::new(Vec::new(), 4, Vec::new(), Vec::new()).unwrap();
        let sol = el_dual_solve(&sys).unwrap();
        assert_eq!(sol.p, vec![0.25; 4]);
    }

    #[test]
    fn constant_column_is_dropped() {
        let u = vec![0.3, 1.0, 0.3, 2.0, 0.3, 4.0];
        let sys = CalibrationSystem::new(u, 3, vec![0.3, 2.0], vec![label(), ConstraintLabel::Covariate("x1".into())]).unwrap();
        let sol = el_dual_solve(&sys).unwrap();
        assert_eq!(sol.lambda[0], 0.0);
        assert!(sol.constraint_residual <= 1e-10);
    }

    #[test]
    fn jointly_infeasible_targets_detected() {
        // each column alone is feasible, but (0.9, 0.9) is outside the hull of
        // {(0,1), (1,0), (0,0)}
        let u = vec![0.0, 1.0, 1.0, 0.0, 0.0, 0.0];
        let sys = CalibrationSystem::new(u, 3, vec![0.9, 0.9], vec![label(), ConstraintLabel::Covariate("x1".into())]).unwrap();
        assert!(matches!(el_dual_solve(&sys), Err(Error::Infeasible { .. })));
    }
}
