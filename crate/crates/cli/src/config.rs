//! JSON run configuration and its validation into an executable plan.
//!
//! Relative paths are resolved against the directory holding the config file.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use mbcel::io::{self, PopulationSchema};
use mbcel::sim::plasmode::{self, PlasmodeConfig};
use mbcel::sim::report::CellLabel;
use mbcel::sim::{
    estimators, EstimatorSettings, Method, MonteCarloConfig, PopulationSource, SampleDesign, ScenarioSpec,
    SelectionModel,
};
use mbcel::{DensityFamily, Error, FinitePopulation, NonProbabilitySample, ProbabilitySample, PropensityModelSpec, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Simulate,
    Plasmode,
    Estimate,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Simulate => "simulate",
            Mode::Plasmode => "plasmode",
            Mode::Estimate => "estimate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T: Clone> OneOrMany<T> {
    pub fn to_vec(&self) -> Vec<T> {
        match self {
            OneOrMany::One(v) => vec![v.clone()],
            OneOrMany::Many(v) => v.clone(),
        }
    }
}

/// A candidate selection model, either a bare formula or a named one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CandidateEntry {
    Formula(String),
    Named { name: String, formula: String },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    pub scenario: Option<OneOrMany<String>>,
    pub population_size: Option<OneOrMany<usize>>,
    pub n_a: Option<OneOrMany<usize>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlasmodeSection {
    pub population_csv: Option<PathBuf>,
    pub covariates: Option<Vec<String>>,
    pub outcome: Option<String>,
    pub stratum: Option<String>,
    pub domain: Option<String>,
    pub n_a: Option<usize>,
    pub minimum_per_stratum: Option<usize>,
    pub selection: Option<SelectionModel>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateSection {
    pub population_csv: Option<PathBuf>,
    pub probability_csv: Option<PathBuf>,
    pub nonprobability_csv: Option<PathBuf>,
    pub covariates: Option<Vec<String>>,
    pub stratum: Option<String>,
    pub domain: Option<String>,
}

/// The on-disk configuration. Every field is optional at parse time so that
/// validation can name exactly what is missing.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Option<Mode>,
    pub seed: Option<u64>,
    pub replications: Option<usize>,
    pub output_dir: Option<PathBuf>,
    pub quiet: Option<bool>,
    pub estimators: Option<Vec<Method>>,
    pub candidates: Option<Vec<CandidateEntry>>,
    pub density_family: Option<DensityFamily>,
    pub variance_for: Option<Vec<Method>>,
    pub level: Option<f64>,
    pub simulate: Option<SimulateSection>,
    pub plasmode: Option<PlasmodeSection>,
    pub estimate: Option<EstimateSection>,
}

pub struct SimulatePlan {
    pub cells: Vec<(CellLabel, MonteCarloConfig)>,
}

pub struct PlasmodePlan {
    pub label: CellLabel,
    pub config: PlasmodeConfig,
}

pub struct EstimatePlan {
    pub population: FinitePopulation,
    pub probability: ProbabilitySample,
    pub nonprobability: NonProbabilitySample,
    pub settings: EstimatorSettings,
}

pub enum Plan {
    Simulate(SimulatePlan),
    Plasmode(PlasmodePlan),
    Estimate(EstimatePlan),
}

fn missing(field: &str) -> Error {
    Error::config(field, "required field is missing")
}

fn resolve_path(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("--config", format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Checks the mode declared in the file against the subcommand.
    pub fn check_mode(&self, mode: Mode) -> Result<()> {
        match self.mode {
            Some(m) if m != mode => Err(Error::config(
                "mode",
                format!("config declares `{}` but the `{}` command was run", m.as_str(), mode.as_str()),
            )),
            _ => Ok(()),
        }
    }

    fn candidate_specs(&self, covariate_names: &[String], default_simulation: bool) -> Result<Vec<PropensityModelSpec>> {
        match &self.candidates {
            None if default_simulation => Ok(estimators::simulation_candidates()),
            None => Ok(Vec::new()),
            Some(list) => list
                .iter()
                .enumerate()
                .map(|(k, c)| {
                    let (name, formula) = match c {
                        CandidateEntry::Formula(f) => (format!("m{}", k + 1), f.as_str()),
                        CandidateEntry::Named { name, formula } => (name.clone(), formula.as_str()),
                    };
                    let mut spec = PropensityModelSpec::parse(formula, covariate_names)?;
                    spec.name = name;
                    Ok(spec)
                })
                .collect(),
        }
    }

    fn settings(
        &self,
        mode: Mode,
        candidates: Vec<PropensityModelSpec>,
        default_family: DensityFamily,
    ) -> Result<EstimatorSettings> {
        let methods = match (&self.estimators, mode) {
            (Some(m), _) => m.clone(),
            (None, Mode::Estimate) => vec![Method::Mel, Method::MelGreg],
            (None, _) => Method::standard_roster(),
        };
        let variance_for = match &self.variance_for {
            Some(v) => v.clone(),
            None if mode == Mode::Estimate => {
                methods.iter().copied().filter(|m| m.is_el() && *m != Method::El0).collect()
            }
            None => methods
                .iter()
                .copied()
                .filter(|m| matches!(m, Method::Mel | Method::MelGreg))
                .collect(),
        };
        if let Some(m) = variance_for.iter().find(|m| !methods.contains(m)) {
            return Err(Error::config("variance_for", format!("{m} is not in `estimators`")));
        }
        let settings = EstimatorSettings {
            methods,
            candidates,
            density_family: self.density_family.unwrap_or(default_family),
            variance_for,
            level: self.level.unwrap_or(0.95),
            keep_weights: mode == Mode::Estimate,
        };
        settings.validate()?;
        Ok(settings)
    }

    fn replications(&self) -> Result<usize> {
        let r = self.replications.ok_or_else(|| missing("replications"))?;
        if r == 0 {
            return Err(Error::config("replications", "must be at least 1"));
        }
        Ok(r)
    }

    /// Validates the configuration for `mode` and loads every input file.
    ///
    /// All configuration checks run before any file is read.
    pub fn plan(&self, mode: Mode, base_dir: &Path) -> Result<Plan> {
        self.check_mode(mode)?;
        match mode {
            Mode::Simulate => self.plan_simulate().map(Plan::Simulate),
            Mode::Plasmode => self.plan_plasmode(base_dir).map(Plan::Plasmode),
            Mode::Estimate => self.plan_estimate(base_dir).map(Plan::Estimate),
        }
    }

    fn plan_simulate(&self) -> Result<SimulatePlan> {
        let sec = self.simulate.as_ref().ok_or_else(|| missing("simulate"))?;
        let scenarios = sec.scenario.as_ref().ok_or_else(|| missing("simulate.scenario"))?.to_vec();
        let sizes = sec
            .population_size
            .as_ref()
            .ok_or_else(|| missing("simulate.population_size"))?
            .to_vec();
        let n_as = sec.n_a.as_ref().ok_or_else(|| missing("simulate.n_a"))?.to_vec();
        for (field, empty) in [
            ("simulate.scenario", scenarios.is_empty()),
            ("simulate.population_size", sizes.is_empty()),
            ("simulate.n_a", n_as.is_empty()),
        ] {
            if empty {
                return Err(Error::config(field, "must list at least one value"));
            }
        }
        let replications = self.replications()?;
        let seed = self.seed.ok_or_else(|| missing("seed"))?;
        let names: Vec<String> = vec!["x1".into(), "x2".into()];
        let settings = self.settings(Mode::Simulate, self.candidate_specs(&names, true)?, DensityFamily::Normal)?;
        let mut cells = Vec::new();
        for &n in &sizes {
            for &n_a in &n_as {
                if n_a == 0 || n_a > n {
                    return Err(Error::config("simulate.n_a", format!("n_a = {n_a} must lie in 1..={n}")));
                }
                for name in &scenarios {
                    let spec = ScenarioSpec::named(name, n).map_err(|e| match e {
                        Error::Config { message, .. } => Error::config("simulate.scenario", message),
                        other => other,
                    })?;
                    let label = CellLabel {
                        scenario: spec.name.clone(),
                        population_size: n,
                        n_a,
                    };
                    let cell = u32::try_from(cells.len()).map_err(|_| Error::config("simulate", "too many cells"))?;
                    let cfg = MonteCarloConfig {
                        source: PopulationSource::Scenario(spec),
                        design: SampleDesign::Srswor { n: n_a },
                        replications,
                        seed,
                        cell,
                        settings: settings.clone(),
                    };
                    cfg.validate()?;
                    cells.push((label, cfg));
                }
            }
        }
        Ok(SimulatePlan { cells })
    }

    fn plan_plasmode(&self, base: &Path) -> Result<PlasmodePlan> {
        let sec = self.plasmode.as_ref().ok_or_else(|| missing("plasmode"))?;
        let path = sec.population_csv.as_ref().ok_or_else(|| missing("plasmode.population_csv"))?;
        let n_a = sec.n_a.ok_or_else(|| missing("plasmode.n_a"))?;
        let replications = self.replications()?;
        let seed = self.seed.ok_or_else(|| missing("seed"))?;
        let selection = sec.selection.clone().unwrap_or_else(plasmode::default_selection);
        let schema = PopulationSchema {
            covariates: sec.covariates.clone(),
            outcome: Some(sec.outcome.clone().unwrap_or_else(|| "y".into())),
            stratum: Some(sec.stratum.clone().unwrap_or_else(|| "stratum".into())),
            domain: sec.domain.clone(),
        };
        let pop = io::read_population_file(&resolve_path(base, path), &schema)?;
        let candidates = self.candidate_specs(pop.covariate_names(), pop.dim() == 2)?;
        let settings = self.settings(Mode::Plasmode, candidates, DensityFamily::Multinomial)?;
        let label = CellLabel {
            scenario: "plasmode".into(),
            population_size: pop.size(),
            n_a,
        };
        let config = PlasmodeConfig {
            population: Arc::new(pop),
            selection,
            n_a,
            minimum_per_stratum: sec.minimum_per_stratum.unwrap_or(40),
            replications,
            seed,
            settings,
        };
        config.monte_carlo()?.validate()?;
        Ok(PlasmodePlan { label, config })
    }

    fn plan_estimate(&self, base: &Path) -> Result<EstimatePlan> {
        let sec = self.estimate.as_ref().ok_or_else(|| missing("estimate"))?;
        let pop_path = sec.population_csv.as_ref().ok_or_else(|| missing("estimate.population_csv"))?;
        let a_path = sec.probability_csv.as_ref().ok_or_else(|| missing("estimate.probability_csv"))?;
        let b_path = sec
            .nonprobability_csv
            .as_ref()
            .ok_or_else(|| missing("estimate.nonprobability_csv"))?;
        let schema = PopulationSchema {
            covariates: sec.covariates.clone(),
            outcome: None,
            stratum: sec.stratum.clone(),
            domain: sec.domain.clone(),
        };
        let pop = io::read_population_file(&resolve_path(base, pop_path), &schema)?;
        let candidates = self.candidate_specs(pop.covariate_names(), false)?;
        let settings = self.settings(Mode::Estimate, candidates, DensityFamily::Normal)?;
        let open = |p: &Path| {
            let full = resolve_path(base, p);
            std::fs::File::open(&full).map_err(|e| Error::Io(format!("{}: {e}", full.display())))
        };
        let probability = io::read_probability_sample_csv(open(a_path)?, &pop)?;
        let nonprobability = io::read_nonprobability_sample_csv(open(b_path)?, &pop)?;
        for (field, check) in [
            ("estimate.probability_csv", mbcel::validate_sample_against_population(&probability, &pop)),
            ("estimate.nonprobability_csv", mbcel::validate_sample_against_population(&nonprobability, &pop)),
        ] {
            if let Err(diags) = check {
                let text: Vec<String> = diags.iter().map(|d| d.to_string()).collect();
                return Err(Error::schema(field, text.join("; ")));
            }
        }
        Ok(EstimatePlan {
            population: pop,
            probability,
            nonprobability,
            settings,
        })
    }
}
