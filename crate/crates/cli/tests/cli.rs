use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mbcel::io::{self, PopulationSchema};
use mbcel::{estimate_mel, DensityFamily, PropensityModelSpec};
use serde_json::{json, Value};

const BIN: &str = env!("CARGO_BIN_EXE_mbcel");

fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/n200")
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("MBCEL_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn write_json(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

fn small_simulation(reps: usize) -> Value {
    json!({
        "mode": "simulate",
        "seed": 5,
        "replications": reps,
        "estimators": ["HT", "GREG", "ALP", "EL_1", "MEL"],
        "candidates": ["logit ~ 1 + x1 + x2", "logit ~ 1 + x1 + y", "logit ~ 1 + x2 + y"],
        "simulate": { "scenario": "S2", "population_size": 800, "n_a": 80 }
    })
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("run_manifest.json")).unwrap()).unwrap()
}

fn read_rows(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path).unwrap().records().map(|r| r.unwrap()).collect()
}

#[test]
fn missing_scenario_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_simulation(2);
    cfg["simulate"].as_object_mut().unwrap().remove("scenario");
    let path = write_json(dir.path(), "c.json", &cfg);
    let out = run(&["simulate", "--config", path.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.contains("simulate.scenario"), "{err}");
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_simulation(2);
    cfg["simulate"]["populaton_size"] = json!(10);
    let path = write_json(dir.path(), "c.json", &cfg);
    let out = run(&["simulate", "--config", path.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn two_replications_give_two_rows_per_estimator() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_json(dir.path(), "c.json", &small_simulation(2));
    let o = dir.path().join("o");
    let out = run(&["simulate", "--config", path.to_str().unwrap(), "--out", o.to_str().unwrap(), "--quiet"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(out.stdout.is_empty());
    let rows = read_rows(&o.join("raw.csv"));
    assert_eq!(rows.len(), 2 * 5);
    for m in ["HT", "GREG", "ALP", "EL_1", "MEL"] {
        assert_eq!(rows.iter().filter(|r| &r[4] == m).count(), 2, "{m}");
    }
}

#[test]
fn every_artifact_is_listed_in_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_simulation(2);
    cfg["variance_for"] = json!(["MEL"]);
    let path = write_json(dir.path(), "c.json", &cfg);
    let o = dir.path().join("o");
    assert!(run(&["simulate", "--config", path.to_str().unwrap(), "--out", o.to_str().unwrap(), "--quiet"]).status.success());
    let m = manifest(&o);
    let mut listed: Vec<String> = m["artifacts"].as_array().unwrap().iter().map(|a| a["file"].as_str().unwrap().to_string()).collect();
    let mut on_disk: Vec<String> = fs::read_dir(&o).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    listed.sort();
    on_disk.sort();
    assert_eq!(listed, on_disk);
    assert!(on_disk.contains(&"coverage.csv".to_string()));
    assert_eq!(m["seed"], json!(5));
    assert_eq!(m["mode"], json!("simulate"));
}

#[test]
fn runs_are_deterministic_across_threads_and_reruns() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_json(dir.path(), "c.json", &small_simulation(4));
    let mut raws = Vec::new();
    for (k, threads) in ["2", "2", "1"].iter().enumerate() {
        let o = dir.path().join(format!("o{k}"));
        let out = run(&["simulate", "--config", path.to_str().unwrap(), "--out", o.to_str().unwrap(), "--threads", threads, "--quiet"]);
        assert!(out.status.success(), "{}", stderr(&out));
        raws.push(fs::read(o.join("raw.csv")).unwrap());
    }
    assert_eq!(raws[0], raws[1]);
    assert_eq!(raws[0], raws[2]);
}

#[test]
fn seed_flag_overrides_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_json(dir.path(), "c.json", &small_simulation(1));
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(run(&["simulate", "--config", path.to_str().unwrap(), "--out", a.to_str().unwrap(), "--quiet"]).status.success());
    assert!(run(&["simulate", "--config", path.to_str().unwrap(), "--out", b.to_str().unwrap(), "--seed", "6", "--quiet"]).status.success());
    assert_ne!(fs::read(a.join("raw.csv")).unwrap(), fs::read(b.join("raw.csv")).unwrap());
    assert_eq!(manifest(&b)["seed"], json!(6));
}

#[test]
fn output_dir_falls_back_to_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_json(dir.path(), "c.json", &small_simulation(1));
    let target = dir.path().join("from_env");
    let out = Command::new(BIN)
        .args(["simulate", "--config", path.to_str().unwrap(), "--quiet"])
        .env("MBCEL_OUT_DIR", &target)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(target.join("run_manifest.json").exists());
}

#[test]
fn zero_threads_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_json(dir.path(), "c.json", &small_simulation(1));
    let out = run(&["simulate", "--config", path.to_str().unwrap(), "--out", dir.path().to_str().unwrap(), "--threads", "0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--threads"));
}

#[test]
fn table1_preset_produces_the_table_layout() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg: Value = serde_json::from_str(&fs::read_to_string(repo_root().join("configs/table1.json")).unwrap()).unwrap();
    cfg["replications"] = json!(2);
    let path = write_json(dir.path(), "table1.json", &cfg);
    let o = dir.path().join("o");
    let out = run(&["simulate", "--config", path.to_str().unwrap(), "--out", o.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = fs::read_to_string(o.join("summary.txt")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "Bias in units of 1e-2; Var and MSE in units of 1e-4");
    for s in ["S1", "S2", "S3"] {
        assert!(lines[1].contains(s));
    }
    assert_eq!(lines[2].matches("Bias").count(), 3);
    let methods = ["HT", "GREG", "EL_1", "EL_2", "EL_3", "MEL", "MEL_GREG"];
    let body: Vec<&str> = lines[3..].iter().copied().filter(|l| !l.trim().is_empty()).collect();
    assert_eq!(body.len(), 4 * methods.len());
    let mut k = 0;
    for (n, n_a) in [(5000, 100), (5000, 400), (10000, 100), (10000, 400)] {
        for m in methods {
            let cols: Vec<&str> = body[k].split_whitespace().collect();
            assert_eq!((cols[0], cols[1], cols[2]), (n.to_string().as_str(), n_a.to_string().as_str(), m), "{}", body[k]);
            assert_eq!(cols.iter().filter(|c| **c == "|").count(), 3);
            k += 1;
        }
    }
    let csv_rows = read_rows(&o.join("summary.csv"));
    assert_eq!(csv_rows.len(), 28);
    let raw = read_rows(&o.join("raw.csv"));
    assert_eq!(raw.len(), 12 * 2 * methods.len());
    assert!(fs::read_to_string(o.join("relative_bias.txt")).unwrap().contains("MEL_GREG"));
    assert!(String::from_utf8_lossy(&out.stdout).contains("Coverage"));
}

// Frozen from the library path below on the committed fixture.
const N200_MEL: f64 = 0.16438121273308107;
const N200_MEL_SE: f64 = 0.27063190377035923;

#[test]
fn fixture_estimate_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "estimate",
        "--config",
        fixture_dir().join("estimate.json").to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "--quiet",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let rows = read_rows(&dir.path().join("estimates.csv"));
    assert_eq!(rows.len(), 8);
    let mel = rows.iter().find(|r| &r[0] == "MEL").unwrap();
    let cli_theta: f64 = mel[1].parse().unwrap();
    let cli_se: f64 = mel[2].parse().unwrap();

    let f = fixture_dir();
    let pop = io::read_population_file(&f.join("population.csv"), &PopulationSchema::default()).unwrap();
    let a = io::read_probability_sample_csv(fs::File::open(f.join("probability.csv")).unwrap(), &pop).unwrap();
    let b = io::read_nonprobability_sample_csv(fs::File::open(f.join("nonprobability.csv")).unwrap(), &pop).unwrap();
    let specs: Vec<PropensityModelSpec> = ["logit ~ 1 + x1 + x2", "logit ~ 1 + x1 + y", "logit ~ 1 + x2 + y"]
        .iter()
        .map(|s| PropensityModelSpec::parse(s, pop.covariate_names()).unwrap())
        .collect();
    let lib = estimate_mel(&pop, &a, &b, &specs, DensityFamily::Normal, false).unwrap();
    assert!((cli_theta - lib.solution.theta_hat).abs() <= 1e-12);
    assert!((cli_theta - N200_MEL).abs() <= 1e-12);
    assert!((cli_se - N200_MEL_SE).abs() <= 1e-10);

    let weights = read_rows(&dir.path().join("weights_MEL.csv"));
    assert_eq!(weights.len(), b.len());
    let total: f64 = weights.iter().map(|r| r[1].parse::<f64>().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-12);
    for r in read_rows(&dir.path().join("residuals.csv")) {
        assert_eq!(&r[4], "true", "{r:?}");
    }
}

/// Copies the fixture population and writes a census B plus the given A.
fn census_case(dir: &Path, estimators: Value) -> (PathBuf, Vec<f64>) {
    let f = fixture_dir();
    fs::copy(f.join("population.csv"), dir.join("population.csv")).unwrap();
    fs::copy(f.join("probability.csv"), dir.join("probability.csv")).unwrap();
    let n = read_rows(&f.join("population.csv")).len();
    let y: Vec<f64> = (0..n).map(|i| ((i * 37) % 11) as f64 - 3.0).collect();
    let mut text = String::from("index,y\n");
    for (i, v) in y.iter().enumerate() {
        text.push_str(&format!("{},{v}\n", i + 1));
    }
    fs::write(dir.join("nonprobability.csv"), text).unwrap();
    let cfg = json!({
        "mode": "estimate",
        "estimators": estimators,
        "estimate": {
            "population_csv": "population.csv",
            "probability_csv": "probability.csv",
            "nonprobability_csv": "nonprobability.csv"
        }
    });
    (write_json(dir, "c.json", &cfg), y)
}

#[test]
fn census_without_candidates_returns_the_population_mean() {
    let dir = tempfile::tempdir().unwrap();
    let (path, y) = census_case(dir.path(), json!(["EL_0"]));
    let o = dir.path().join("o");
    let out = run(&["estimate", "--config", path.to_str().unwrap(), "--out", o.to_str().unwrap(), "--quiet"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let rows = read_rows(&o.join("estimates.csv"));
    let theta: f64 = rows[0][1].parse().unwrap();
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    assert!((theta - mean).abs() < 1e-12, "{theta} vs {mean}");
    for r in read_rows(&o.join("weights_EL_0.csv")) {
        assert!((r[1].parse::<f64>().unwrap() - 1.0 / y.len() as f64).abs() < 1e-15);
    }
}

#[test]
fn malformed_sample_header_names_the_column() {
    let dir = tempfile::tempdir().unwrap();
    let (path, _) = census_case(dir.path(), json!(["EL_0"]));
    let text = fs::read_to_string(dir.path().join("probability.csv")).unwrap();
    fs::write(dir.path().join("probability.csv"), text.replacen("index,y,pi", "idx,y,pi", 1)).unwrap();
    let out = run(&["estimate", "--config", path.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    let err = stderr(&out);
    assert!(err.contains("`index`"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);
}

#[test]
fn infeasible_calibration_reports_the_constraint() {
    let dir = tempfile::tempdir().unwrap();
    let (path, _) = census_case(dir.path(), json!(["EL_0"]));
    let pop = read_rows(&dir.path().join("population.csv"));
    // keep only units with x1 above 1, so the population mean of x1 is out of reach
    let mut text = String::from("index,y\n");
    for (i, r) in pop.iter().enumerate() {
        if r[0].parse::<f64>().unwrap() > 1.0 {
            text.push_str(&format!("{},0.5\n", i + 1));
        }
    }
    fs::write(dir.path().join("nonprobability.csv"), text).unwrap();
    let out = run(&["estimate", "--config", path.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4));
    let err = stderr(&out);
    assert!(err.contains("EL_0") && err.contains("covariate:x1"), "{err}");
}

#[test]
fn plasmode_preset_runs_on_the_committed_population() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg: Value = serde_json::from_str(&fs::read_to_string(repo_root().join("configs/plasmode.json")).unwrap()).unwrap();
    cfg["replications"] = json!(2);
    cfg["estimators"] = json!(["HT", "ALP", "MEL"]);
    cfg["variance_for"] = json!([]);
    cfg["plasmode"]["population_csv"] = json!(repo_root().join("data/plasmode_population.csv"));
    let path = write_json(dir.path(), "p.json", &cfg);
    let o = dir.path().join("o");
    let out = run(&["plasmode", "--config", path.to_str().unwrap(), "--out", o.to_str().unwrap(), "--quiet"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let domains = read_rows(&o.join("domain_raw.csv"));
    assert!(!domains.is_empty());
    let rate = manifest(&o)["results"]["mean_selection_probability"].as_f64().unwrap();
    assert!((rate - 0.375).abs() < 0.03, "{rate}");
}
