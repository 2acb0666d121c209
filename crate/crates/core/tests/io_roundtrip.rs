use mbcel::io::{self, PopulationSchema};
use mbcel::sim::plasmode::synthetic_population;
use mbcel::sim::sampling::{draw_nonprob, draw_stratified_srswor};
use mbcel::{Error, FinitePopulation};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn full_schema() -> PopulationSchema {
    PopulationSchema {
        covariates: None,
        outcome: Some("y".into()),
        stratum: Some("stratum".into()),
        domain: Some("domain".into()),
    }
}

proptest! {
    #[test]
    fn population_csv_round_trips_exactly(
        rows in prop::collection::vec((-1e6f64..1e6, -1e-3f64..1e-3, -50.0f64..50.0, 0i64..5, 1i64..4), 1..40),
    ) {
        let covariates: Vec<f64> = rows.iter().flat_map(|r| [r.0, r.1]).collect();
        let pop = FinitePopulation::new(covariates, vec!["x1".into(), "x2".into()])
            .unwrap()
            .with_outcomes(rows.iter().map(|r| r.2).collect())
            .unwrap()
            .with_strata(rows.iter().map(|r| r.3).collect())
            .unwrap()
            .with_domains(rows.iter().map(|r| r.4).collect())
            .unwrap();
        let mut buf = Vec::new();
        io::write_population_csv(&mut buf, &pop).unwrap();
        let back = io::read_population_csv(buf.as_slice(), &full_schema()).unwrap();
        prop_assert_eq!(back, pop);
    }
}

#[test]
fn stratified_samples_round_trip() {
    let pop = synthetic_population(3000, 4).unwrap();
    let pop = mbcel::sim::plasmode::attach_selection(&pop, &mbcel::sim::plasmode::default_selection()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = draw_stratified_srswor(&pop, 300, 10, &mut rng).unwrap();
    let b = draw_nonprob(&pop, &mut rng).unwrap();
    let mut buf = Vec::new();
    io::write_probability_sample_csv(&mut buf, &a).unwrap();
    let a2 = io::read_probability_sample_csv(buf.as_slice(), &pop).unwrap();
    assert_eq!(a2, a);
    let mut buf = Vec::new();
    io::write_nonprobability_sample_csv(&mut buf, &b).unwrap();
    assert_eq!(io::read_nonprobability_sample_csv(buf.as_slice(), &pop).unwrap(), b);
}

#[test]
fn missing_declared_column_is_named() {
    let text = "x1,x2,outcome\n1,2,3\n";
    match io::read_population_csv(text.as_bytes(), &full_schema()) {
        Err(Error::Schema { column, .. }) => assert_eq!(column, "y"),
        other => panic!("expected schema error, got {other:?}"),
    }
}

#[test]
fn sample_file_without_pi_column_is_rejected() {
    let pop = synthetic_population(100, 1).unwrap();
    let text = "index,y\n1,3\n";
    match io::read_probability_sample_csv(text.as_bytes(), &pop) {
        Err(Error::Schema { column, .. }) => assert_eq!(column, "pi"),
        other => panic!("expected schema error, got {other:?}"),
    }
}
