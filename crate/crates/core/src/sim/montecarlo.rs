//! Monte Carlo driver with per-replication random substreams.

use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::data::{population_mean, FinitePopulation};
use crate::error::{Error, Result};
use crate::sim::estimators::{run_estimators, DomainSpec, EstimatorSettings, MethodResult, ResidualCheck};
use crate::sim::metrics::{aggregate, MetricsTable};
use crate::sim::sampling;
use crate::sim::scenario::{generate_population, ScenarioSpec};

/// Where each replication's finite population comes from.
#[derive(Debug, Clone)]
pub enum PopulationSource {
    /// A fresh draw from the scenario in every replication.
    Scenario(ScenarioSpec),
    /// One fixed population with true selection probabilities attached.
    Fixed(Arc<FinitePopulation>),
}

/// Probability-sample design.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SampleDesign {
    Srswor { n: usize },
    Stratified { n: usize, minimum: usize },
}

#[derive(Debug, Clone)]
pub struct MonteCarloConfig {
    pub source: PopulationSource,
    pub design: SampleDesign,
    pub replications: usize,
    pub seed: u64,
    /// Distinguishes grid cells sharing a seed; enters the stream id.
    pub cell: u32,
    pub settings: EstimatorSettings,
}

impl MonteCarloConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::config("replications", "must be at least 1"));
        }
        if self.replications > u32::MAX as usize {
            return Err(Error::config("replications", "too many replications"));
        }
        match &self.source {
            PopulationSource::Scenario(s) => s.validate()?,
            PopulationSource::Fixed(p) => {
                if p.outcomes().is_none() || p.selection_probs_true().is_none() {
                    return Err(Error::config(
                        "population",
                        "a fixed population needs outcomes and selection probabilities",
                    ));
                }
            }
        }
        self.settings.validate()
    }

    fn rng(&self, replication: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream((u64::from(self.cell) << 32) | replication as u64);
        rng
    }
}

/// Everything recorded for one replication.
#[derive(Debug, Clone)]
pub struct ReplicationResult {
    pub replication: usize,
    pub theta_n: f64,
    pub domain_truth: Vec<f64>,
    pub n_a: usize,
    pub n_b: usize,
    pub methods: Vec<MethodResult>,
    pub checks: Vec<ResidualCheck>,
    /// Population or sampling failure; no estimator ran.
    pub error: Option<String>,
    pub elapsed: Duration,
}

/// Sequential or data-parallel replication loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    #[default]
    Sequential,
    #[cfg(feature = "parallel")]
    Parallel,
}

impl Execution {
    /// Parallel when the feature is compiled in, sequential otherwise.
    pub fn best_available() -> Self {
        #[cfg(feature = "parallel")]
        {
            Execution::Parallel
        }
        #[cfg(not(feature = "parallel"))]
        {
            Execution::Sequential
        }
    }
}

/// Output of [`run_monte_carlo`].
#[derive(Debug, Clone)]
pub struct MonteCarloRun {
    pub replications: Vec<ReplicationResult>,
    pub metrics: MetricsTable,
    pub domain_labels: Vec<i64>,
}

pub fn run_replication(cfg: &MonteCarloConfig, replication: usize) -> ReplicationResult {
    let start = Instant::now();
    let mut rng = cfg.rng(replication);
    let mut out = ReplicationResult {
        replication,
        theta_n: f64::NAN,
        domain_truth: Vec::new(),
        n_a: 0,
        n_b: 0,
        methods: Vec::new(),
        checks: Vec::new(),
        error: None,
        elapsed: Duration::ZERO,
    };
    let generated;
    let pop: &FinitePopulation = match &cfg.source {
        PopulationSource::Scenario(spec) => match generate_population(spec, &mut rng) {
            Ok(p) => {
                generated = p;
                &generated
            }
            Err(e) => {
                out.error = Some(format!("population: {e}"));
                return out;
            }
        },
        PopulationSource::Fixed(p) => p,
    };
    let sampled = (|| {
        let theta = population_mean(pop)?;
        let a = match cfg.design {
            SampleDesign::Srswor { n } => sampling::draw_srswor(pop, n, &mut rng)?,
            SampleDesign::Stratified { n, minimum } => sampling::draw_stratified_srswor(pop, n, minimum, &mut rng)?,
        };
        let b = sampling::draw_nonprob(pop, &mut rng)?;
        Ok::<_, Error>((theta, a, b))
    })();
    let (theta, a, b) = match sampled {
        Ok(v) => v,
        Err(e) => {
            out.error = Some(format!("sampling: {e}"));
            return out;
        }
    };
    let domains = DomainSpec::from_population(pop);
    out.theta_n = theta;
    out.domain_truth = domains
        .as_ref()
        .map(|d| d.true_means(pop))
        .transpose()
        .unwrap_or_default()
        .unwrap_or_default();
    out.n_a = a.len();
    out.n_b = b.len();
    let (methods, checks) = run_estimators(pop, &a, &b, &cfg.settings, domains.as_ref());
    out.methods = methods;
    out.checks = checks;
    out.elapsed = start.elapsed();
    out
}

/// Runs every replication and aggregates in replication order.
pub fn run_monte_carlo(cfg: &MonteCarloConfig, exec: Execution) -> Result<MonteCarloRun> {
    cfg.validate()?;
    let replications: Vec<ReplicationResult> = match exec {
        Execution::Sequential => (0..cfg.replications).map(|r| run_replication(cfg, r)).collect(),
        #[cfg(feature = "parallel")]
        Execution::Parallel => (0..cfg.replications)
            .into_par_iter()
            .map(|r| run_replication(cfg, r))
            .collect(),
    };
    let domain_labels = match &cfg.source {
        PopulationSource::Fixed(p) => DomainSpec::from_population(p).map(|d| d.labels).unwrap_or_default(),
        PopulationSource::Scenario(_) => Vec::new(),
    };
    let metrics = aggregate(&replications, &cfg.settings.methods, &domain_labels);
    Ok(MonteCarloRun {
        replications,
        metrics,
        domain_labels,
    })
}
