//! Runs a validated plan and writes its artifacts plus `run_manifest.json`.

use std::fs;
use std::path::{Path, PathBuf};

use mbcel::sim::report::{self, CellSummary, InferenceStat};
use mbcel::sim::{run_estimators, run_monte_carlo, DomainSpec, Execution, MonteCarloRun, ReplicationResult};
use mbcel::{io, Error, Result};
use serde::Serialize;
use serde_json::json;

use crate::config::{EstimatePlan, Mode, Plan, PlasmodePlan, RunConfig, SimulatePlan};

pub const MANIFEST: &str = "run_manifest.json";

/// Collects written files so the manifest can list every one of them.
struct Artifacts {
    dir: PathBuf,
    files: Vec<serde_json::Value>,
}

impl Artifacts {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, contents).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        self.files.push(json!({ "file": name, "bytes": contents.len() }));
        Ok(())
    }
}

/// What a finished command reports back to `main`.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub output_dir: PathBuf,
    pub artifacts: Vec<String>,
    /// Human-readable summary, printed unless quiet.
    pub summary: String,
}

/// Settings resolved from flags and environment.
#[derive(Debug, Clone, PartialEq)]
pub struct Invocation {
    pub mode: Mode,
    pub config_path: PathBuf,
    pub out_dir: PathBuf,
    pub seed: Option<u64>,
    pub threads: usize,
}

fn violations(reps: &[ReplicationResult]) -> Vec<serde_json::Value> {
    reps.iter()
        .flat_map(|r| r.checks.iter().map(move |c| (r.replication, c)))
        .filter(|(_, c)| !c.holds())
        .map(|(rep, c)| json!({ "replication": rep, "kind": c.kind, "label": c.label, "value": c.value, "tol": c.tol }))
        .collect()
}

fn failure_counts(run: &MonteCarloRun) -> serde_json::Value {
    let per_method: serde_json::Map<String, serde_json::Value> = run
        .metrics
        .methods
        .iter()
        .map(|m| (m.method.to_string(), json!(m.failures)))
        .collect();
    json!({
        "replications_failed": run.replications.iter().filter(|r| r.error.is_some()).count(),
        "per_method": per_method,
    })
}

fn run_parallel(cfg: &mbcel::sim::MonteCarloConfig) -> Result<MonteCarloRun> {
    run_monte_carlo(cfg, Execution::best_available())
}

fn simulate(plan: &SimulatePlan, out: &mut Artifacts) -> Result<(String, serde_json::Value)> {
    let mut runs = Vec::with_capacity(plan.cells.len());
    for (label, cfg) in &plan.cells {
        runs.push((label.clone(), run_parallel(cfg)?));
    }
    let raw_cells: Vec<_> = runs.iter().map(|(l, r)| (l, r.replications.as_slice())).collect();
    out.write("raw.csv", &report::raw_csv(&raw_cells)?)?;
    let summaries: Vec<CellSummary> = runs
        .iter()
        .map(|(label, r)| CellSummary {
            label: label.clone(),
            metrics: r.metrics.clone(),
        })
        .collect();
    let text = write_tables(&summaries, out)?;
    let cells: Vec<_> = runs
        .iter()
        .map(|(label, r)| {
            json!({
                "cell": label,
                "failures": failure_counts(r),
                "check_violations": violations(&r.replications),
            })
        })
        .collect();
    Ok((text, json!(cells)))
}

fn write_tables(summaries: &[CellSummary], out: &mut Artifacts) -> Result<String> {
    let table = report::summary_table_text(summaries);
    out.write("summary.csv", &report::summary_table_csv(summaries)?)?;
    out.write("summary.txt", &table)?;
    let mut text = table;
    let has_var = summaries
        .iter()
        .any(|c| c.metrics.methods.iter().any(|m| m.mean_var_hat.is_some()));
    if has_var {
        for (stem, stat) in [("relative_bias", InferenceStat::RelativeBias), ("coverage", InferenceStat::Coverage)] {
            let t = report::inference_table_text(summaries, stat);
            out.write(&format!("{stem}.csv"), &report::inference_table_csv(summaries, stat)?)?;
            out.write(&format!("{stem}.txt"), &t)?;
            text.push('\n');
            text.push_str(&t);
        }
    }
    Ok(text)
}

fn plasmode(plan: &PlasmodePlan, out: &mut Artifacts) -> Result<(String, serde_json::Value)> {
    let run = run_parallel(&plan.config.monte_carlo()?)?;
    out.write("raw.csv", &report::raw_csv(&[(&plan.label, &run.replications)])?)?;
    let summaries = [CellSummary {
        label: plan.label.clone(),
        metrics: run.metrics.clone(),
    }];
    let mut text = write_tables(&summaries, out)?;
    if !run.domain_labels.is_empty() {
        out.write("domain_raw.csv", &report::domain_raw_csv(&run.replications, &run.domain_labels)?)?;
        out.write("domain_summary.csv", &report::domain_table_csv(&run.metrics)?)?;
        let t = report::domain_table_text(&run.metrics);
        out.write("domain_summary.txt", &t)?;
        text.push('\n');
        text.push_str(&t);
    }
    let mean_pi = {
        let p = plan.config.monte_carlo()?;
        match &p.source {
            mbcel::sim::PopulationSource::Fixed(pop) => {
                let pr = pop.selection_probs_true().unwrap_or(&[]);
                pr.iter().sum::<f64>() / pr.len().max(1) as f64
            }
            mbcel::sim::PopulationSource::Scenario(_) => f64::NAN,
        }
    };
    Ok((
        text,
        json!({
            "cell": plan.label,
            "mean_selection_probability": mean_pi,
            "failures": failure_counts(&run),
            "check_violations": violations(&run.replications),
        }),
    ))
}

#[derive(Serialize)]
struct EstimateRow {
    method: String,
    estimate: f64,
    std_error: Option<f64>,
    ci_lower: Option<f64>,
    ci_upper: Option<f64>,
    level: f64,
}

fn estimate(plan: &EstimatePlan, out: &mut Artifacts) -> Result<(String, serde_json::Value)> {
    let (pop, a, b) = (&plan.population, &plan.probability, &plan.nonprobability);
    let domains = DomainSpec::from_population(pop);
    let (results, checks) = run_estimators(pop, a, b, &plan.settings, domains.as_ref());
    if let Some(err) = results.iter().find_map(|r| r.error.clone().map(|e| e.in_stage(r.method.to_string()))) {
        return Err(err);
    }
    if let Some(c) = checks.iter().find(|c| !c.holds()) {
        return Err(Error::NonConvergence {
            solver: c.kind,
            iterations: 0,
            residual: c.value,
        }
        .in_stage(c.label.clone()));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut text = format!("{:<9} {:>14} {:>12} {:>14} {:>14}\n", "Method", "Estimate", "SE", "CI lower", "CI upper");
    for r in &results {
        let theta = r.theta_hat.expect("successful estimator has a point estimate");
        let row = EstimateRow {
            method: r.method.to_string(),
            estimate: theta,
            std_error: r.var_hat.map(f64::sqrt),
            ci_lower: r.ci.map(|c| c.0),
            ci_upper: r.ci.map(|c| c.1),
            level: plan.settings.level,
        };
        let cell = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"));
        text.push_str(&format!(
            "{:<9} {:>14.6} {:>12} {:>14} {:>14}\n",
            row.method,
            theta,
            cell(row.std_error),
            cell(row.ci_lower),
            cell(row.ci_upper)
        ));
        w.serialize(&row).map_err(Error::from)?;
    }
    out.write("estimates.csv", &csv_string(w)?)?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["kind", "label", "value", "tol", "holds"])?;
    for c in &checks {
        w.write_record([c.kind.to_string(), c.label.clone(), format!("{:e}", c.value), format!("{:e}", c.tol), c.holds().to_string()])?;
    }
    out.write("residuals.csv", &csv_string(w)?)?;

    if let Some(d) = &domains {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["method", "domain", "estimate"])?;
        for r in &results {
            for (label, est) in d.labels.iter().zip(&r.domain_estimates) {
                w.write_record([r.method.to_string(), label.to_string(), est.map(|v| format!("{v:.17e}")).unwrap_or_default()])?;
            }
        }
        out.write("domain_estimates.csv", &csv_string(w)?)?;
    }

    for r in &results {
        if let Some(p) = &r.weights {
            let mut buf = Vec::new();
            io::write_weights_csv(&mut buf, b, p)?;
            out.write(&format!("weights_{}.csv", r.method), &String::from_utf8(buf).expect("utf-8"))?;
        }
    }
    out.write("summary.txt", &text)?;
    let info = json!({
        "population_size": pop.size(),
        "n_a": a.len(),
        "n_b": b.len(),
    });
    Ok((text, info))
}

fn csv_string(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Loads, validates and runs one command.
pub fn execute(inv: &Invocation) -> Result<Outcome> {
    let mut config = RunConfig::from_file(&inv.config_path)?;
    if inv.seed.is_some() {
        config.seed = inv.seed;
    }
    let base = inv
        .config_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let plan = config.plan(inv.mode, &base)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(inv.threads)
        .build()
        .map_err(|e| Error::config("--threads", e.to_string()))?;
    let mut out = Artifacts::new(&inv.out_dir)?;
    let (summary, details) = pool.install(|| match &plan {
        Plan::Simulate(p) => simulate(p, &mut out),
        Plan::Plasmode(p) => plasmode(p, &mut out),
        Plan::Estimate(p) => estimate(p, &mut out),
    })?;
    let mut listed = out.files.clone();
    listed.push(json!({ "file": MANIFEST }));
    let manifest = json!({
        "tool": "mbcel",
        "version": mbcel::VERSION,
        "mode": inv.mode.as_str(),
        "seed": config.seed,
        "threads": inv.threads,
        "config": config,
        "artifacts": listed,
        "results": details,
    });
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Io(e.to_string()))? + "\n";
    let path = inv.out_dir.join(MANIFEST);
    fs::write(&path, text).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let artifacts = listed
        .iter()
        .filter_map(|v| v["file"].as_str().map(String::from))
        .collect();
    Ok(Outcome {
        output_dir: inv.out_dir.clone(),
        artifacts,
        summary,
    })
}
