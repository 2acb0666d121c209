//! The estimator roster and a single-sample driver that runs any subset of it.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::{self, WeightedEstimate};
use crate::data::{FinitePopulation, NonProbabilitySample, ProbabilitySample};
use crate::density::DensityFamily;
use crate::el::{CalibrationSetup, MelEstimate};
use crate::error::{Error, Result};
use crate::propensity::{self, PropensityModelSpec};
use crate::variance;

/// An estimator of the population mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Method {
    Ht,
    Greg,
    Rdw,
    Clw,
    Alp,
    Fdw,
    AlpS,
    El0,
    /// EL calibrated on the k-th candidate model (1-based).
    Elk(usize),
    Mel,
    MelGreg,
}

impl Method {
    /// The thirteen estimators of the standard comparison with three candidates.
    pub fn standard_roster() -> Vec<Method> {
        use Method::*;
        vec![Ht, Greg, Rdw, Clw, Alp, Fdw, AlpS, El0, Elk(1), Elk(2), Elk(3), Mel, MelGreg]
    }

    pub fn is_el(self) -> bool {
        matches!(self, Method::El0 | Method::Elk(_) | Method::Mel | Method::MelGreg)
    }

    fn needs_candidates(self) -> bool {
        matches!(self, Method::Elk(_) | Method::Mel | Method::MelGreg)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Ht => f.write_str("HT"),
            Method::Greg => f.write_str("GREG"),
            Method::Rdw => f.write_str("RDW"),
            Method::Clw => f.write_str("CLW"),
            Method::Alp => f.write_str("ALP"),
            Method::Fdw => f.write_str("FDW"),
            Method::AlpS => f.write_str("ALP_s"),
            Method::El0 => f.write_str("EL_0"),
            Method::Elk(k) => write!(f, "EL_{k}"),
            Method::Mel => f.write_str("MEL"),
            Method::MelGreg => f.write_str("MEL_GREG"),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let m = match s {
            "HT" => Method::Ht,
            "GREG" => Method::Greg,
            "RDW" => Method::Rdw,
            "CLW" => Method::Clw,
            "ALP" => Method::Alp,
            "FDW" => Method::Fdw,
            "ALP_s" => Method::AlpS,
            "EL_0" => Method::El0,
            "MEL" => Method::Mel,
            "MEL_GREG" => Method::MelGreg,
            other => match other.strip_prefix("EL_").and_then(|k| k.parse::<usize>().ok()) {
                Some(k) if k >= 1 => Method::Elk(k),
                _ => return Err(Error::config("methods", format!("unknown estimator `{other}`"))),
            },
        };
        Ok(m)
    }
}

impl TryFrom<String> for Method {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Method> for String {
    fn from(m: Method) -> String {
        m.to_string()
    }
}

/// The three candidate models of the two-covariate simulation: (x1, x2),
/// (x1, y) and (x2, y), each with an intercept.
pub fn simulation_candidates() -> Vec<PropensityModelSpec> {
    use crate::propensity::Term::{Covariate, Outcome};
    [
        ("m1", vec![Covariate(0), Covariate(1)]),
        ("m2", vec![Covariate(0), Outcome]),
        ("m3", vec![Covariate(1), Outcome]),
    ]
    .into_iter()
    .map(|(name, terms)| PropensityModelSpec::new(name, terms, 2).expect("valid two-covariate model"))
    .collect()
}

/// What to run on each sample pair.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorSettings {
    pub methods: Vec<Method>,
    pub candidates: Vec<PropensityModelSpec>,
    pub density_family: DensityFamily,
    /// EL-family methods that also get a sandwich variance and Wald interval.
    pub variance_for: Vec<Method>,
    pub level: f64,
    /// Keep each EL method's weight vector in its result.
    pub keep_weights: bool,
}

impl EstimatorSettings {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::config("methods", "at least one estimator is required"));
        }
        for m in &self.methods {
            if let Method::Elk(k) = m {
                if *k > self.candidates.len() {
                    return Err(Error::config(
                        "methods",
                        format!("{m} refers to candidate {k} but only {} are declared", self.candidates.len()),
                    ));
                }
            }
            if m.needs_candidates() && self.candidates.is_empty() {
                return Err(Error::config("candidates", format!("{m} needs at least one candidate model")));
            }
        }
        if let Some(m) = self.variance_for.iter().find(|m| !m.is_el() || **m == Method::El0) {
            return Err(Error::config("variance_for", format!("no variance estimator for {m}")));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::config("level", "must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// One estimator's output on one sample pair.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodResult {
    pub method: Method,
    pub theta_hat: Option<f64>,
    pub var_hat: Option<f64>,
    pub ci: Option<(f64, f64)>,
    /// Domain means in the order of the domain labels passed in.
    pub domain_estimates: Vec<Option<f64>>,
    /// EL weights over B, when requested.
    pub weights: Option<Vec<f64>>,
    pub error: Option<Error>,
}

/// A first-order or calibration condition checked at a returned solution.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualCheck {
    pub kind: &'static str,
    pub label: String,
    pub value: f64,
    pub tol: f64,
}

impl ResidualCheck {
    pub fn holds(&self) -> bool {
        self.value <= self.tol
    }
}

/// Domain membership for domain-mean estimation.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainSpec {
    pub labels: Vec<i64>,
    /// Per population unit.
    pub membership: Vec<i64>,
}

impl DomainSpec {
    pub fn from_population(pop: &FinitePopulation) -> Option<Self> {
        let membership = pop.domains()?.to_vec();
        let mut labels = membership.clone();
        labels.sort_unstable();
        labels.dedup();
        Some(Self { labels, membership })
    }

    fn indicator_over(&self, units: &[usize], label: i64) -> Vec<bool> {
        units.iter().map(|&i| self.membership[i] == label).collect()
    }

    fn population_indicator(&self, label: i64) -> Vec<bool> {
        self.membership.iter().map(|&m| m == label).collect()
    }

    /// Population domain means of y.
    pub fn true_means(&self, pop: &FinitePopulation) -> Result<Vec<f64>> {
        let y = pop
            .outcomes()
            .ok_or_else(|| Error::Precondition("domain truth needs population outcomes".into()))?;
        Ok(self
            .labels
            .iter()
            .map(|&l| {
                let (s, c) = y
                    .iter()
                    .zip(&self.membership)
                    .filter(|(_, m)| **m == l)
                    .fold((0.0, 0usize), |(s, c), (y, _)| (s + y, c + 1));
                s / c as f64
            })
            .collect())
    }
}

/// Weighted domain mean Σ_{B∩d} p y / Σ_{B∩d} p.
pub fn estimate_domain_mean(p: &[f64], y: &[f64], indicator: &[bool]) -> Result<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for ((pi, yi), &d) in p.iter().zip(y).zip(indicator) {
        if d {
            num += pi * yi;
            den += pi;
        }
    }
    if den == 0.0 {
        return Err(Error::Precondition("domain has no units in the non-probability sample".into()));
    }
    Ok(num / den)
}

enum Fitted {
    Weighted(WeightedEstimate, Over),
    Greg(baselines::GregFit),
    El(Box<MelEstimate>),
}

#[derive(Clone, Copy)]
enum Over {
    A,
    B,
}

/// Runs every configured estimator on one (A, B) pair.
pub fn run_estimators(
    pop: &FinitePopulation,
    a: &ProbabilitySample,
    b: &NonProbabilitySample,
    settings: &EstimatorSettings,
    domains: Option<&DomainSpec>,
) -> (Vec<MethodResult>, Vec<ResidualCheck>) {
    let mut checks = Vec::new();
    let needs_candidates = settings.methods.iter().any(|m| m.needs_candidates());
    let needs_setup = settings.methods.iter().any(|m| m.is_el());
    let specs: &[PropensityModelSpec] = if needs_candidates { &settings.candidates } else { &[] };
    let setup = needs_setup.then(|| CalibrationSetup::new(pop, Some(a), b, specs, settings.density_family));

    if let Some(Ok(setup)) = &setup {
        for k in 0..setup.candidate_count() {
            if let Ok(fit) = setup.candidate_fit(k) {
                checks.push(ResidualCheck {
                    kind: "propensity",
                    label: fit.spec.name.clone(),
                    value: propensity::estimating_function_residual(pop, b, fit),
                    tol: 1e-8,
                });
            }
        }
        if let Some(Ok(d)) = setup.density() {
            if !d.degenerate {
                checks.push(ResidualCheck {
                    kind: "density",
                    label: format!("{:?}", d.family).to_lowercase(),
                    value: d.score_norm,
                    tol: 1e-8,
                });
            }
        }
    }

    let mut alp_fdw: Option<Result<(WeightedEstimate, WeightedEstimate)>> = None;
    let mut results = Vec::with_capacity(settings.methods.len());
    for &method in &settings.methods {
        let fitted: Result<Fitted> = match method {
            Method::Ht => baselines::estimate_ht(a).map(|w| Fitted::Weighted(w, Over::A)),
            Method::Greg => baselines::estimate_greg(pop, a).map(Fitted::Greg),
            Method::Rdw => baselines::estimate_rdw(pop, a, b).map(|w| Fitted::Weighted(w, Over::B)),
            Method::Clw => baselines::estimate_clw(pop, a, b).map(|w| Fitted::Weighted(w, Over::B)),
            Method::AlpS => baselines::estimate_alp_s(pop, a, b).map(|w| Fitted::Weighted(w, Over::B)),
            Method::Alp | Method::Fdw => {
                let pair = alp_fdw.get_or_insert_with(|| baselines::estimate_alp_and_fdw(pop, a, b));
                match pair {
                    Ok((alp, fdw)) => {
                        let w = if method == Method::Alp { alp.clone() } else { fdw.clone() };
                        Ok(Fitted::Weighted(w, Over::B))
                    }
                    Err(e) => Err(e.clone()),
                }
            }
            Method::El0 | Method::Elk(_) | Method::Mel | Method::MelGreg => match setup.as_ref().expect("setup built") {
                Err(e) => Err(e.clone()),
                Ok(setup) => {
                    let est = match method {
                        Method::El0 => setup.solve(&[], true),
                        Method::Elk(k) => setup.solve(&[k - 1], false),
                        Method::Mel => setup.solve_all(false),
                        _ => setup.solve_all(true),
                    };
                    est.map(|e| Fitted::El(Box::new(e)))
                }
            },
        };
        results.push(finish(method, fitted, pop, a, b, settings, domains, &mut checks));
    }
    (results, checks)
}

#[allow(clippy::too_many_arguments)]
fn finish(
    method: Method,
    fitted: Result<Fitted>,
    pop: &FinitePopulation,
    a: &ProbabilitySample,
    b: &NonProbabilitySample,
    settings: &EstimatorSettings,
    domains: Option<&DomainSpec>,
    checks: &mut Vec<ResidualCheck>,
) -> MethodResult {
    let mut out = MethodResult {
        method,
        theta_hat: None,
        var_hat: None,
        ci: None,
        domain_estimates: Vec::new(),
        weights: None,
        error: None,
    };
    let fitted = match fitted {
        Ok(f) => f,
        Err(e) => {
            out.error = Some(e);
            return out;
        }
    };
    let label_list: &[i64] = domains.map_or(&[], |d| &d.labels);
    match &fitted {
        Fitted::Weighted(w, over) => {
            out.theta_hat = Some(w.estimate);
            if w.phi_hat.is_some() {
                checks.push(ResidualCheck {
                    kind: "baseline",
                    label: method.to_string(),
                    value: w.score_norm,
                    tol: 1e-8,
                });
            }
            if let Some(d) = domains {
                let (units, y) = match over {
                    Over::A => (a.indices(), a.outcomes()),
                    Over::B => (b.indices(), b.outcomes()),
                };
                out.domain_estimates = label_list
                    .iter()
                    .map(|&l| w.domain_mean(y, &d.indicator_over(units, l)).ok())
                    .collect();
            }
        }
        Fitted::Greg(g) => {
            out.theta_hat = Some(g.estimate);
            if let Some(d) = domains {
                out.domain_estimates = label_list
                    .iter()
                    .map(|&l| g.domain_mean(pop, a, &d.population_indicator(l)).ok())
                    .collect();
            }
        }
        Fitted::El(est) => {
            let sol = &est.solution;
            out.theta_hat = Some(sol.theta_hat);
            if settings.keep_weights {
                out.weights = Some(sol.p.clone());
            }
            let total: f64 = sol.p.iter().sum();
            let positive = sol.p.iter().all(|p| *p > 0.0);
            checks.push(ResidualCheck {
                kind: "el",
                label: method.to_string(),
                value: sol.constraint_residual,
                tol: 1e-10,
            });
            checks.push(ResidualCheck {
                kind: "el-weights",
                label: method.to_string(),
                value: if positive { (total - 1.0).abs() } else { f64::INFINITY },
                tol: 1e-12,
            });
            if let Some(d) = domains {
                out.domain_estimates = label_list
                    .iter()
                    .map(|&l| estimate_domain_mean(&sol.p, b.outcomes(), &d.indicator_over(b.indices(), l)).ok())
                    .collect();
            }
            if settings.variance_for.contains(&method) {
                let var = variance::build_stacked_system(pop, a, b, est)
                    .and_then(|sys| {
                        let v = variance::sandwich_variance(&sys)?;
                        Ok(v[(sys.dim() - 1, sys.dim() - 1)])
                    })
                    .and_then(|v| variance::wald_interval(sol.theta_hat, v, settings.level).map(|ci| (v, ci)));
                match var {
                    Ok((v, ci)) => {
                        out.var_hat = Some(v);
                        out.ci = Some(ci);
                    }
                    Err(e) => out.error = Some(e.in_stage("variance")),
                }
            }
        }
    }
    out
}
