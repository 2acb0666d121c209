//! CSV ingestion and export for populations, samples and weights.
//!
//! Population files carry one row per unit with a header row. Sample files
//! reference units by one-based population index.

use std::io::{Read, Write};
use std::path::Path;

use crate::data::{Design, FinitePopulation, NonProbabilitySample, ProbabilitySample, StratumDesign};
use crate::error::{Error, Result};

/// Which population columns play which role.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PopulationSchema {
    /// Explicit covariate columns; `None` means every column not claimed below.
    pub covariates: Option<Vec<String>>,
    pub outcome: Option<String>,
    pub stratum: Option<String>,
    pub domain: Option<String>,
}

fn column(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::schema(name, "column not found in header"))
}

fn parse_f64(field: &str, column: &str, row: usize) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::schema(column, format!("row {row}: `{field}` is not a finite number")))
}

fn parse_label(field: &str, column: &str, row: usize) -> Result<i64> {
    let t = field.trim();
    t.parse::<i64>()
        .ok()
        .or_else(|| t.parse::<f64>().ok().filter(|v| v.fract() == 0.0).map(|v| v as i64))
        .ok_or_else(|| Error::schema(column, format!("row {row}: `{field}` is not an integer label")))
}

pub fn read_population_csv<R: Read>(reader: R, schema: &PopulationSchema) -> Result<FinitePopulation> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.is_empty() {
        return Err(Error::schema("<header>", "missing header row"));
    }
    for (j, h) in headers.iter().enumerate() {
        if h.trim().is_empty() {
            return Err(Error::schema(format!("#{}", j + 1), "empty column name"));
        }
    }
    let outcome_col = schema.outcome.as_deref().map(|n| column(&headers, n)).transpose()?;
    let stratum_col = schema.stratum.as_deref().map(|n| column(&headers, n)).transpose()?;
    let domain_col = schema.domain.as_deref().map(|n| column(&headers, n)).transpose()?;
    let covariate_names: Vec<String> = match &schema.covariates {
        Some(names) => names.clone(),
        None => headers
            .iter()
            .enumerate()
            .filter(|(j, _)| Some(*j) != outcome_col && Some(*j) != stratum_col && Some(*j) != domain_col)
            .map(|(_, h)| h.to_string())
            .collect(),
    };
    let covariate_cols = covariate_names
        .iter()
        .map(|n| column(&headers, n))
        .collect::<Result<Vec<_>>>()?;

    let mut covs = Vec::new();
    let mut outcomes = Vec::new();
    let mut missing_outcomes = 0usize;
    let mut strata = Vec::new();
    let mut domains = Vec::new();
    for (r, record) in rdr.records().enumerate() {
        let record = record?;
        let row = r + 1;
        for (&c, name) in covariate_cols.iter().zip(&covariate_names) {
            covs.push(parse_f64(record.get(c).unwrap_or(""), name, row)?);
        }
        if let (Some(c), Some(name)) = (outcome_col, schema.outcome.as_deref()) {
            let field = record.get(c).unwrap_or("");
            if field.trim().is_empty() {
                missing_outcomes += 1;
                outcomes.push(f64::NAN);
            } else {
                outcomes.push(parse_f64(field, name, row)?);
            }
        }
        if let (Some(c), Some(name)) = (stratum_col, schema.stratum.as_deref()) {
            strata.push(parse_label(record.get(c).unwrap_or(""), name, row)?);
        }
        if let (Some(c), Some(name)) = (domain_col, schema.domain.as_deref()) {
            domains.push(parse_label(record.get(c).unwrap_or(""), name, row)?);
        }
    }
    if covs.is_empty() {
        return Err(Error::schema("<rows>", "population file has no data rows"));
    }
    let mut pop = FinitePopulation::new(covs, covariate_names)?;
    if let Some(name) = &schema.outcome {
        if missing_outcomes == 0 {
            pop = pop.with_outcomes(outcomes)?;
        } else if missing_outcomes != pop.size() {
            return Err(Error::schema(name.as_str(), "outcome column is only partially observed"));
        }
    }
    if schema.stratum.is_some() {
        pop = pop.with_strata(strata)?;
    }
    if schema.domain.is_some() {
        pop = pop.with_domains(domains)?;
    }
    Ok(pop)
}

pub fn read_population_file(path: &Path, schema: &PopulationSchema) -> Result<FinitePopulation> {
    let file = std::fs::File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    read_population_csv(file, schema)
}

/// Writes covariates, then outcome, stratum and domain columns when present.
pub fn write_population_csv<W: Write>(writer: W, pop: &FinitePopulation) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = pop.covariate_names().to_vec();
    if pop.outcomes().is_some() {
        header.push("y".into());
    }
    if pop.strata().is_some() {
        header.push("stratum".into());
    }
    if pop.domains().is_some() {
        header.push("domain".into());
    }
    w.write_record(&header)?;
    for i in 0..pop.size() {
        let mut rec: Vec<String> = pop.row(i).iter().map(|v| v.to_string()).collect();
        if let Some(y) = pop.outcomes() {
            rec.push(y[i].to_string());
        }
        if let Some(s) = pop.strata() {
            rec.push(s[i].to_string());
        }
        if let Some(d) = pop.domains() {
            rec.push(d[i].to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads `index,y,pi` rows into a probability sample.
///
/// The design is SRSWOR over the population when every π equals n/N, and
/// stratified SRSWOR when the population carries strata; otherwise a data
/// error is returned, since no other designs are supported.
pub fn read_probability_sample_csv<R: Read>(reader: R, pop: &FinitePopulation) -> Result<ProbabilitySample> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let ic = column(&headers, "index")?;
    let yc = column(&headers, "y")?;
    let pc = column(&headers, "pi")?;
    let mut indices = Vec::new();
    let mut ys = Vec::new();
    let mut pis = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        indices.push(parse_index(rec.get(ic).unwrap_or(""), pop.size(), r + 1)?);
        ys.push(parse_f64(rec.get(yc).unwrap_or(""), "y", r + 1)?);
        pis.push(parse_f64(rec.get(pc).unwrap_or(""), "pi", r + 1)?);
    }
    let n = indices.len();
    let srs_pi = n as f64 / pop.size() as f64;
    let design = if pis.iter().all(|p| (p - srs_pi).abs() <= 1e-12 * srs_pi) {
        pis.iter_mut().for_each(|p| *p = srs_pi);
        Design::Srswor {
            sample_size: n,
            population_size: pop.size(),
        }
    } else if let Some(labels) = pop.strata() {
        stratified_design(&indices, &mut pis, labels)?
    } else {
        return Err(Error::schema(
            "pi",
            "unequal inclusion probabilities need a stratum column in the population",
        ));
    };
    ProbabilitySample::new(indices, pis, ys, design)
}

fn stratified_design(indices: &[usize], pis: &mut [f64], labels: &[i64]) -> Result<Design> {
    let mut strata: Vec<StratumDesign> = Vec::new();
    let mut sorted: Vec<i64> = labels.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    for label in sorted {
        let population_size = labels.iter().filter(|l| **l == label).count();
        let sample_size = indices.iter().filter(|&&i| labels[i] == label).count();
        if sample_size > 0 {
            strata.push(StratumDesign {
                label,
                sample_size,
                population_size,
            });
        }
    }
    for (k, &i) in indices.iter().enumerate() {
        let s = strata.iter().find(|s| s.label == labels[i]).expect("stratum present");
        let expected = s.sample_size as f64 / s.population_size as f64;
        if (pis[k] - expected).abs() > 1e-9 * expected {
            return Err(Error::schema(
                "pi",
                format!(
                    "unit {} has pi {} but stratum {} implies {expected}",
                    i + 1,
                    pis[k],
                    s.label
                ),
            ));
        }
        pis[k] = expected;
    }
    Ok(Design::StratifiedSrswor { strata })
}

/// Reads `index,y` rows into a non-probability sample.
pub fn read_nonprobability_sample_csv<R: Read>(reader: R, pop: &FinitePopulation) -> Result<NonProbabilitySample> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let ic = column(&headers, "index")?;
    let yc = column(&headers, "y")?;
    let mut indices = Vec::new();
    let mut ys = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        indices.push(parse_index(rec.get(ic).unwrap_or(""), pop.size(), r + 1)?);
        ys.push(parse_f64(rec.get(yc).unwrap_or(""), "y", r + 1)?);
    }
    NonProbabilitySample::new(indices, ys)
}

fn parse_index(field: &str, n: usize, row: usize) -> Result<usize> {
    let idx: usize = field
        .trim()
        .parse()
        .map_err(|_| Error::schema("index", format!("row {row}: `{field}` is not a unit index")))?;
    if idx == 0 || idx > n {
        return Err(Error::schema("index", format!("row {row}: index {idx} outside 1..={n}")));
    }
    Ok(idx - 1)
}

pub fn write_probability_sample_csv<W: Write>(writer: W, a: &ProbabilitySample) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["index", "y", "pi"])?;
    for k in 0..a.len() {
        w.write_record(&[
            (a.indices()[k] + 1).to_string(),
            a.outcomes()[k].to_string(),
            a.inclusion_probs()[k].to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_nonprobability_sample_csv<W: Write>(writer: W, b: &NonProbabilitySample) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["index", "y"])?;
    for k in 0..b.len() {
        w.write_record(&[(b.indices()[k] + 1).to_string(), b.outcomes()[k].to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `index,p` audit rows for calibrated weights over B.
pub fn write_weights_csv<W: Write>(writer: W, b: &NonProbabilitySample, p: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["index", "p"])?;
    for (i, pi) in b.indices().iter().zip(p) {
        w.write_record(&[(i + 1).to_string(), pi.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_population_with_roles() {
        let text = "x1,x2,y,stratum\n1,2,3,1\n4,5,6,2\n";
        let schema = PopulationSchema {
            outcome: Some("y".into()),
            stratum: Some("stratum".into()),
            ..Default::default()
        };
        let pop = read_population_csv(text.as_bytes(), &schema).unwrap();
        assert_eq!(pop.size(), 2);
        assert_eq!(pop.covariate_names(), ["x1", "x2"]);
        assert_eq!(pop.row(1), [4.0, 5.0]);
        assert_eq!(pop.outcomes().unwrap(), [3.0, 6.0]);
        assert_eq!(pop.strata().unwrap(), [1, 2]);
    }

    #[test]
    fn empty_outcome_column_means_unobserved() {
        let text = "x1,y\n1,\n2,\n";
        let schema = PopulationSchema {
            outcome: Some("y".into()),
            ..Default::default()
        };
        let pop = read_population_csv(text.as_bytes(), &schema).unwrap();
        assert!(pop.outcomes().is_none());
    }

    #[test]
    fn missing_column_names_the_column() {
        let schema = PopulationSchema {
            covariates: Some(vec!["x1".into(), "x9".into()]),
            ..Default::default()
        };
        let err = read_population_csv("x1,x2\n1,2\n".as_bytes(), &schema).unwrap_err();
        assert_eq!(err, Error::schema("x9", "column not found in header"));
    }

    #[test]
    fn bad_number_is_schema_error() {
        let err = read_population_csv("x1\nabc\n".as_bytes(), &PopulationSchema::default()).unwrap_err();
        assert!(matches!(err, Error::Schema { ref column, .. } if column == "x1"));
    }

    #[test]
    fn sample_files_round_trip() {
        let pop = FinitePopulation::from_rows(&[vec![0.0], vec![1.0], vec![2.0], vec![3.0]])
            .unwrap()
            .with_outcomes(vec![0.5, 1.5, 2.5, 3.5])
            .unwrap();
        let a = ProbabilitySample::srswor(vec![3, 1], vec![3.5, 1.5], 4).unwrap();
        let b = NonProbabilitySample::new(vec![0, 2], vec![0.5, 2.5]).unwrap();
        let mut buf = Vec::new();
        write_probability_sample_csv(&mut buf, &a).unwrap();
        assert_eq!(read_probability_sample_csv(buf.as_slice(), &pop).unwrap(), a);
        let mut buf = Vec::new();
        write_nonprobability_sample_csv(&mut buf, &b).unwrap();
        assert_eq!(read_nonprobability_sample_csv(buf.as_slice(), &pop).unwrap(), b);
    }

    #[test]
    fn out_of_range_sample_index_rejected() {
        let pop = FinitePopulation::from_rows(&[vec![0.0]]).unwrap();
        let err = read_nonprobability_sample_csv("index,y\n2,1.0\n".as_bytes(), &pop).unwrap_err();
        assert!(matches!(err, Error::Schema { ref column, .. } if column == "index"));
    }
}
