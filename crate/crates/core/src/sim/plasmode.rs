//! Plasmode study: a fixed finite population read from file, stratified
//! probability samples and an MNAR Bernoulli non-probability sample.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::FinitePopulation;
use crate::error::{Error, Result};
use crate::sim::estimators::EstimatorSettings;
use crate::sim::montecarlo::{run_monte_carlo, Execution, MonteCarloConfig, MonteCarloRun, PopulationSource, SampleDesign};
use crate::sim::scenario::SelectionModel;

/// logit π_B = −2 + 0.2·x₂ + 0.3·y over two covariates.
pub fn default_selection() -> SelectionModel {
    SelectionModel::Linear {
        intercept: -2.0,
        covariates: vec![0.0, 0.2],
        outcome: 0.3,
    }
}

/// Returns a copy of `pop` carrying the selection probabilities of `model`.
pub fn attach_selection(pop: &FinitePopulation, model: &SelectionModel) -> Result<FinitePopulation> {
    let y = pop
        .outcomes()
        .ok_or_else(|| Error::schema("y", "plasmode population needs an outcome column"))?;
    let width = match model {
        SelectionModel::Linear { covariates, .. } => covariates.len(),
        SelectionModel::Piecewise { base, .. } => base.len(),
    };
    if width != pop.dim() {
        return Err(Error::config(
            "selection",
            format!("model has {width} covariate coefficients but the population has {}", pop.dim()),
        ));
    }
    let probs = (0..pop.size()).map(|i| model.probability(pop.row(i), y[i])).collect();
    pop.clone().with_selection_probs(probs)
}

#[derive(Debug, Clone)]
pub struct PlasmodeConfig {
    pub population: Arc<FinitePopulation>,
    pub selection: SelectionModel,
    pub n_a: usize,
    pub minimum_per_stratum: usize,
    pub replications: usize,
    pub seed: u64,
    pub settings: EstimatorSettings,
}

impl PlasmodeConfig {
    pub fn monte_carlo(&self) -> Result<MonteCarloConfig> {
        if self.population.strata().is_none() {
            return Err(Error::schema("stratum", "plasmode population needs a stratum column"));
        }
        let pop = attach_selection(&self.population, &self.selection)?;
        Ok(MonteCarloConfig {
            source: PopulationSource::Fixed(Arc::new(pop)),
            design: SampleDesign::Stratified {
                n: self.n_a,
                minimum: self.minimum_per_stratum,
            },
            replications: self.replications,
            seed: self.seed,
            cell: 0,
            settings: self.settings.clone(),
        })
    }
}

pub fn run_plasmode(cfg: &PlasmodeConfig, exec: Execution) -> Result<MonteCarloRun> {
    run_monte_carlo(&cfg.monte_carlo()?, exec)
}

/// A synthetic stand-in for a survey population: a four-level region code
/// x1, a binary indicator x2, a five-point outcome drawn from a multinomial
/// logit that is linear in (x1, x2), strata by (x1, x2) and four age groups
/// whose outcome means differ slightly.
pub fn synthetic_population(size: usize, seed: u64) -> Result<FinitePopulation> {
    if size == 0 {
        return Err(Error::config("population_size", "must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let region_cdf = [0.2, 0.5, 0.75, 1.0];
    let base = [0.0, 0.0, 1.0, 2.2, 2.8];
    let mut covariates = Vec::with_capacity(2 * size);
    let mut outcomes = Vec::with_capacity(size);
    let mut strata = Vec::with_capacity(size);
    let mut domains = Vec::with_capacity(size);
    for _ in 0..size {
        let u: f64 = rng.random();
        let x1 = 1 + region_cdf.iter().position(|c| u < *c).unwrap_or(3);
        let x2 = u8::from(rng.random::<f64>() < 0.35 + 0.05 * x1 as f64);
        let mut w = [0.0; 5];
        for (k, wk) in w.iter_mut().enumerate() {
            let eta = base[k] + 0.1 * k as f64 * (x1 as f64 - 2.5) + 0.25 * k as f64 * f64::from(x2);
            *wk = eta.exp();
        }
        let total: f64 = w.iter().sum();
        let mut v = rng.random::<f64>() * total;
        let mut y = 5;
        for (k, wk) in w.iter().enumerate() {
            if v < *wk {
                y = k + 1;
                break;
            }
            v -= wk;
        }
        let mut a = [0.0; 4];
        for (g, ag) in a.iter_mut().enumerate() {
            *ag = (0.15 * g as f64 * (y as f64 - 4.0)).exp();
        }
        let at: f64 = a.iter().sum();
        let mut v = rng.random::<f64>() * at;
        let mut age = 4;
        for (g, ag) in a.iter().enumerate() {
            if v < *ag {
                age = g + 1;
                break;
            }
            v -= ag;
        }
        covariates.extend([x1 as f64, f64::from(x2)]);
        outcomes.push(y as f64);
        strata.push(10 * x1 as i64 + i64::from(x2));
        domains.push(age as i64);
    }
    FinitePopulation::new(covariates, vec!["x1".into(), "x2".into()])?
        .with_outcomes(outcomes)?
        .with_strata(strata)?
        .with_domains(domains)
}
