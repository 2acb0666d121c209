//! Raw per-replication CSV and summary tables.
//!
//! Bias is reported in units of 10⁻² and variance and MSE in units of 10⁻⁴;
//! the conversion happens here and nowhere else. Timing is never written so
//! that reruns are byte-identical.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::Result;
use crate::sim::estimators::Method;
use crate::sim::metrics::MetricsTable;
use crate::sim::montecarlo::ReplicationResult;

pub const BIAS_UNIT: f64 = 1e-2;
pub const VAR_UNIT: f64 = 1e-4;

/// Coordinates of one simulation cell.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CellLabel {
    pub scenario: String,
    pub population_size: usize,
    pub n_a: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellSummary {
    pub label: CellLabel,
    pub metrics: MetricsTable,
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(v) if v.is_finite() => format!("{v:.17e}"),
        _ => String::new(),
    }
}

/// One row per (replication, method).
pub fn raw_csv(cells: &[(&CellLabel, &[ReplicationResult])]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "scenario",
        "population_size",
        "n_a_target",
        "replication",
        "method",
        "theta_n",
        "theta_hat",
        "var_hat",
        "ci_lower",
        "ci_upper",
        "ci_hit",
        "n_a",
        "n_b",
        "error",
    ])?;
    for (label, reps) in cells {
        for rep in reps.iter() {
            let header = [
                label.scenario.clone(),
                label.population_size.to_string(),
                label.n_a.to_string(),
                rep.replication.to_string(),
            ];
            if let Some(err) = &rep.error {
                let mut row = header.to_vec();
                row.extend(["", &fmt_opt(Some(rep.theta_n)), "", "", "", "", ""].map(String::from));
                row.extend([rep.n_a.to_string(), rep.n_b.to_string(), err.clone()]);
                w.write_record(&row)?;
                continue;
            }
            for m in &rep.methods {
                let (lo, hi) = m.ci.unzip();
                let hit = m.ci.map(|(lo, hi)| u8::from(lo <= rep.theta_n && rep.theta_n <= hi).to_string());
                let mut row = header.to_vec();
                row.extend([
                    m.method.to_string(),
                    fmt_opt(Some(rep.theta_n)),
                    fmt_opt(m.theta_hat),
                    fmt_opt(m.var_hat),
                    fmt_opt(lo),
                    fmt_opt(hi),
                    hit.unwrap_or_default(),
                    rep.n_a.to_string(),
                    rep.n_b.to_string(),
                    m.error.as_ref().map(|e| e.to_string()).unwrap_or_default(),
                ]);
                w.write_record(&row)?;
            }
        }
    }
    finish(w)
}

/// One row per (replication, method, domain) with the domain's true mean.
pub fn domain_raw_csv(reps: &[ReplicationResult], labels: &[i64]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["replication", "method", "domain", "truth", "estimate"])?;
    for rep in reps {
        for m in &rep.methods {
            for (d, &label) in labels.iter().enumerate() {
                let truth = rep.domain_truth.get(d).copied();
                let est = m.domain_estimates.get(d).copied().flatten();
                w.write_record([
                    rep.replication.to_string(),
                    m.method.to_string(),
                    label.to_string(),
                    fmt_opt(truth),
                    fmt_opt(est),
                ])?;
            }
        }
    }
    finish(w)
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| crate::error::Error::Io(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Distinct values in first-seen order.
fn ordered<T: PartialEq + Clone>(items: impl Iterator<Item = T>) -> Vec<T> {
    let mut out: Vec<T> = Vec::new();
    for it in items {
        if !out.contains(&it) {
            out.push(it);
        }
    }
    out
}

struct Grid<'a> {
    sizes: Vec<(usize, usize)>,
    scenarios: Vec<String>,
    cells: &'a [CellSummary],
}

impl<'a> Grid<'a> {
    fn new(cells: &'a [CellSummary]) -> Self {
        Self {
            sizes: ordered(cells.iter().map(|c| (c.label.population_size, c.label.n_a))),
            scenarios: ordered(cells.iter().map(|c| c.label.scenario.clone())),
            cells,
        }
    }

    fn methods(&self, filter: impl Fn(&crate::sim::metrics::MethodMetrics) -> bool) -> Vec<Method> {
        ordered(
            self.cells
                .iter()
                .flat_map(|c| c.metrics.methods.iter())
                .filter(|m| filter(m))
                .map(|m| m.method),
        )
    }

    fn cell(&self, size: (usize, usize), scenario: &str) -> Option<&'a CellSummary> {
        self.cells.iter().find(|c| {
            (c.label.population_size, c.label.n_a) == size && c.label.scenario == scenario
        })
    }
}

fn scaled(v: f64, unit: f64) -> Option<f64> {
    v.is_finite().then_some(v / unit)
}

fn text_num(v: Option<f64>, decimals: usize) -> String {
    match v {
        Some(v) => format!("{v:.decimals$}"),
        None => "NA".into(),
    }
}

/// Bias, variance and MSE by (N, n_A, method) with one column group per scenario.
pub fn summary_table_csv(cells: &[CellSummary]) -> Result<String> {
    let g = Grid::new(cells);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["N".to_string(), "n_A".into(), "method".into()];
    for s in &g.scenarios {
        header.extend([format!("{s}_bias"), format!("{s}_var"), format!("{s}_mse"), format!("{s}_failures")]);
    }
    w.write_record(&header)?;
    let methods = g.methods(|_| true);
    for &size in &g.sizes {
        for &method in &methods {
            let mut row = vec![size.0.to_string(), size.1.to_string(), method.to_string()];
            for s in &g.scenarios {
                let m = g.cell(size, s).and_then(|c| c.metrics.get(method));
                row.push(fmt_opt(m.and_then(|m| scaled(m.bias, BIAS_UNIT))));
                row.push(fmt_opt(m.and_then(|m| scaled(m.variance, VAR_UNIT))));
                row.push(fmt_opt(m.and_then(|m| scaled(m.mse, VAR_UNIT))));
                row.push(m.map(|m| m.failures.to_string()).unwrap_or_default());
            }
            w.write_record(&row)?;
        }
    }
    finish(w)
}

pub fn summary_table_text(cells: &[CellSummary]) -> String {
    let g = Grid::new(cells);
    let mut out = String::new();
    let _ = writeln!(out, "Bias in units of 1e-2; Var and MSE in units of 1e-4");
    let _ = write!(out, "{:>7} {:>5} {:<9}", "N", "n_A", "Method");
    for s in &g.scenarios {
        let _ = write!(out, " | {:^23}", s);
    }
    out.push('\n');
    let _ = write!(out, "{:>7} {:>5} {:<9}", "", "", "");
    for _ in &g.scenarios {
        let _ = write!(out, " | {:>7} {:>7} {:>7}", "Bias", "Var", "MSE");
    }
    out.push('\n');
    let methods = g.methods(|_| true);
    for (k, &size) in g.sizes.iter().enumerate() {
        if k > 0 {
            out.push('\n');
        }
        for &method in &methods {
            let _ = write!(out, "{:>7} {:>5} {:<9}", size.0, size.1, method.to_string());
            for s in &g.scenarios {
                let m = g.cell(size, s).and_then(|c| c.metrics.get(method));
                let _ = write!(
                    out,
                    " | {:>7} {:>7} {:>7}",
                    text_num(m.and_then(|m| scaled(m.bias, BIAS_UNIT)), 0),
                    text_num(m.and_then(|m| scaled(m.variance, VAR_UNIT)), 0),
                    text_num(m.and_then(|m| scaled(m.mse, VAR_UNIT)), 0),
                );
            }
            out.push('\n');
        }
    }
    out
}

/// Which per-method statistic a scenario-by-method table shows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InferenceStat {
    RelativeBias,
    Coverage,
}

impl InferenceStat {
    fn pick(self, m: &crate::sim::metrics::MethodMetrics) -> Option<f64> {
        match self {
            InferenceStat::RelativeBias => m.relative_bias_var,
            InferenceStat::Coverage => m.coverage,
        }
    }

    fn title(self) -> &'static str {
        match self {
            InferenceStat::RelativeBias => "Relative bias of the variance estimator",
            InferenceStat::Coverage => "Coverage of the Wald interval",
        }
    }
}

/// Rows (N, n_A), columns scenario × method, for methods with a variance estimator.
pub fn inference_table_csv(cells: &[CellSummary], stat: InferenceStat) -> Result<String> {
    let g = Grid::new(cells);
    let methods = g.methods(|m| m.mean_var_hat.is_some());
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["N".to_string(), "n_A".into()];
    for s in &g.scenarios {
        header.extend(methods.iter().map(|m| format!("{s}_{m}")));
    }
    w.write_record(&header)?;
    for &size in &g.sizes {
        let mut row = vec![size.0.to_string(), size.1.to_string()];
        for s in &g.scenarios {
            for &method in &methods {
                let m = g.cell(size, s).and_then(|c| c.metrics.get(method));
                row.push(fmt_opt(m.and_then(|m| stat.pick(m))));
            }
        }
        w.write_record(&row)?;
    }
    finish(w)
}

pub fn inference_table_text(cells: &[CellSummary], stat: InferenceStat) -> String {
    let g = Grid::new(cells);
    let methods = g.methods(|m| m.mean_var_hat.is_some());
    let width = methods.len() * 10;
    let mut out = String::new();
    let _ = writeln!(out, "{}", stat.title());
    let _ = write!(out, "{:>7} {:>5}", "N", "n_A");
    for s in &g.scenarios {
        let _ = write!(out, " | {:^width$}", s);
    }
    out.push('\n');
    let _ = write!(out, "{:>7} {:>5}", "", "");
    for _ in &g.scenarios {
        out.push_str(" |");
        for m in &methods {
            let _ = write!(out, " {:>9}", m.to_string());
        }
    }
    out.push('\n');
    for &size in &g.sizes {
        let _ = write!(out, "{:>7} {:>5}", size.0, size.1);
        for s in &g.scenarios {
            out.push_str(" |");
            for &method in &methods {
                let m = g.cell(size, s).and_then(|c| c.metrics.get(method));
                let _ = write!(out, " {:>9}", text_num(m.and_then(|m| stat.pick(m)), 3));
            }
        }
        out.push('\n');
    }
    out
}

/// Domain-mean bias, variance and MSE in raw units.
pub fn domain_table_csv(metrics: &MetricsTable) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["method", "domain", "successes", "bias", "var", "mse"])?;
    for m in &metrics.methods {
        for d in &m.domains {
            w.write_record([
                m.method.to_string(),
                d.label.to_string(),
                d.successes.to_string(),
                fmt_opt(Some(d.bias)),
                fmt_opt(Some(d.variance)),
                fmt_opt(Some(d.mse)),
            ])?;
        }
    }
    finish(w)
}

pub fn domain_table_text(metrics: &MetricsTable) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<9} {:>6} {:>10} {:>10} {:>10}", "Method", "Domain", "Bias", "Var", "MSE");
    for m in &metrics.methods {
        for d in &m.domains {
            let _ = writeln!(
                out,
                "{:<9} {:>6} {:>10} {:>10} {:>10}",
                m.method.to_string(),
                d.label,
                text_num(d.bias.is_finite().then_some(d.bias), 4),
                text_num(d.variance.is_finite().then_some(d.variance), 5),
                text_num(d.mse.is_finite().then_some(d.mse), 5),
            );
        }
    }
    out
}
