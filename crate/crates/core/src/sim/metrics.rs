//! Aggregation of replication results into bias, variance, MSE, relative
//! bias of the variance estimator and interval coverage.

use serde::Serialize;

use crate::sim::estimators::Method;
use crate::sim::montecarlo::ReplicationResult;

/// Summary of one estimator of a domain mean.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DomainMetrics {
    pub label: i64,
    pub successes: usize,
    pub bias: f64,
    pub variance: f64,
    pub mse: f64,
}

/// Summary of one estimator over the replications where it succeeded.
///
/// Errors are θ̂ − θ_N against each replication's own finite population;
/// the variance uses the 1/R denominator so that MSE = bias² + variance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodMetrics {
    pub method: Method,
    pub successes: usize,
    pub failures: usize,
    pub bias: f64,
    pub variance: f64,
    pub mse: f64,
    pub mean_var_hat: Option<f64>,
    /// (V̄ − V_MC)/V_MC over replications with a variance estimate.
    pub relative_bias_var: Option<f64>,
    pub coverage: Option<f64>,
    pub domains: Vec<DomainMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsTable {
    pub methods: Vec<MethodMetrics>,
}

impl MetricsTable {
    pub fn get(&self, method: Method) -> Option<&MethodMetrics> {
        self.methods.iter().find(|m| m.method == method)
    }
}

/// Mean, 1/R variance and mean square of `errors`.
pub fn moments(errors: &[f64]) -> (f64, f64, f64) {
    if errors.is_empty() {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let r = errors.len() as f64;
    let mean = errors.iter().sum::<f64>() / r;
    let var = errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / r;
    let mse = errors.iter().map(|e| e * e).sum::<f64>() / r;
    (mean, var, mse)
}

pub fn aggregate(reps: &[ReplicationResult], methods: &[Method], domain_labels: &[i64]) -> MetricsTable {
    let rows = methods
        .iter()
        .enumerate()
        .map(|(k, &method)| {
            let mut errors = Vec::new();
            let mut var_errors = Vec::new();
            let mut var_hats = Vec::new();
            let mut hits = 0usize;
            let mut failures = 0usize;
            let mut domain_errors = vec![Vec::new(); domain_labels.len()];
            for rep in reps {
                let Some(res) = rep.methods.get(k).filter(|r| r.method == method && rep.theta_n.is_finite()) else {
                    failures += 1;
                    continue;
                };
                let Some(theta) = res.theta_hat else {
                    failures += 1;
                    continue;
                };
                errors.push(theta - rep.theta_n);
                if let (Some(v), Some((lo, hi))) = (res.var_hat, res.ci) {
                    var_errors.push(theta - rep.theta_n);
                    var_hats.push(v);
                    if lo <= rep.theta_n && rep.theta_n <= hi {
                        hits += 1;
                    }
                }
                for (d, est) in res.domain_estimates.iter().enumerate() {
                    if let (Some(est), Some(truth)) = (est, rep.domain_truth.get(d)) {
                        domain_errors[d].push(est - truth);
                    }
                }
            }
            let (bias, variance, mse) = moments(&errors);
            let (mean_var_hat, relative_bias_var, coverage) = if var_hats.is_empty() {
                (None, None, None)
            } else {
                let n = var_hats.len() as f64;
                let vbar = var_hats.iter().sum::<f64>() / n;
                let (_, vmc, _) = moments(&var_errors);
                (Some(vbar), Some((vbar - vmc) / vmc), Some(hits as f64 / n))
            };
            let domains = domain_labels
                .iter()
                .zip(&domain_errors)
                .map(|(&label, e)| {
                    let (bias, variance, mse) = moments(e);
                    DomainMetrics {
                        label,
                        successes: e.len(),
                        bias,
                        variance,
                        mse,
                    }
                })
                .collect();
            MethodMetrics {
                method,
                successes: errors.len(),
                failures,
                bias,
                variance,
                mse,
                mean_var_hat,
                relative_bias_var,
                coverage,
                domains,
            }
        })
        .collect();
    MetricsTable { methods: rows }
}
