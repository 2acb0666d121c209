use mbcel::el::CalibrationSetup;
use mbcel::sim::estimators::{estimate_domain_mean, simulation_candidates};
use mbcel::sim::metrics::moments;
use mbcel::sim::sampling::{allocate_stratified, draw_bernoulli, draw_nonprob, draw_srswor};
use mbcel::sim::{
    generate_population, run_monte_carlo, run_replication, EstimatorSettings, Execution, Method, MonteCarloConfig,
    PopulationSource, SampleDesign, ScenarioSpec,
};
use mbcel::{DensityFamily, FinitePopulation};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_config(reps: usize) -> MonteCarloConfig {
    MonteCarloConfig {
        source: PopulationSource::Scenario(ScenarioSpec::named("S2", 1500).unwrap()),
        design: SampleDesign::Srswor { n: 150 },
        replications: reps,
        seed: 99,
        cell: 3,
        settings: EstimatorSettings {
            methods: vec![Method::Ht, Method::Greg, Method::Alp, Method::Elk(2), Method::Mel, Method::MelGreg],
            candidates: simulation_candidates(),
            density_family: DensityFamily::Normal,
            variance_for: vec![Method::Mel],
            level: 0.95,
            keep_weights: false,
        },
    }
}

fn line_population(n: usize) -> FinitePopulation {
    let rows: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64]).collect();
    FinitePopulation::from_rows(&rows)
        .unwrap()
        .with_outcomes((0..n).map(|i| (i % 7) as f64).collect())
        .unwrap()
}

#[test]
fn single_replication_rerun_is_bit_identical() {
    let cfg = small_config(1);
    let a = run_replication(&cfg, 0);
    let b = run_replication(&cfg, 0);
    assert_eq!(a.theta_n.to_bits(), b.theta_n.to_bits());
    assert_eq!((a.n_a, a.n_b), (b.n_a, b.n_b));
    for (x, y) in a.methods.iter().zip(&b.methods) {
        assert_eq!(x.method, y.method);
        assert_eq!(x.theta_hat.map(f64::to_bits), y.theta_hat.map(f64::to_bits));
        assert_eq!(x.var_hat.map(f64::to_bits), y.var_hat.map(f64::to_bits));
    }
}

#[test]
fn replications_differ_and_metrics_are_deterministic() {
    let cfg = small_config(6);
    let r1 = run_monte_carlo(&cfg, Execution::Sequential).unwrap();
    let r2 = run_monte_carlo(&cfg, Execution::best_available()).unwrap();
    assert_ne!(r1.replications[0].theta_n, r1.replications[1].theta_n);
    let a = serde_json::to_string(&r1.metrics.methods).unwrap();
    let b = serde_json::to_string(&r2.metrics.methods).unwrap();
    assert_eq!(a, b);
}

#[test]
fn metrics_rows_satisfy_the_mse_identity() {
    let run = run_monte_carlo(&small_config(8), Execution::Sequential).unwrap();
    for m in &run.metrics.methods {
        assert!((m.mse - (m.bias * m.bias + m.variance)).abs() <= 1e-15 * m.mse.max(1.0), "{}", m.method);
        assert_eq!(m.successes + m.failures, 8);
    }
}

#[test]
fn mel_greg_constraints_extend_mel_constraints() {
    let spec = ScenarioSpec::named("S3", 5000).unwrap();
    let cands = simulation_candidates();
    let mut checked = 0;
    for rep in 0..30u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + rep);
        let pop = generate_population(&spec, &mut rng).unwrap();
        let a = draw_srswor(&pop, 400, &mut rng).unwrap();
        let b = draw_nonprob(&pop, &mut rng).unwrap();
        let setup = CalibrationSetup::new(&pop, Some(&a), &b, &cands, DensityFamily::Normal).unwrap();
        // a candidate without a root fails both systems alike
        let (Ok(mel), Ok(greg)) = (setup.solve_all(false), setup.solve_all(true)) else {
            continue;
        };
        let greg_labels = greg.system.labels();
        assert!(mel.system.labels().iter().all(|l| greg_labels.contains(l)), "rep {rep}");
        assert_eq!(greg_labels.len(), mel.system.labels().len() + pop.dim());
        checked += 1;
    }
    assert!(checked >= 15, "only {checked} replications solved");
}

#[test]
fn srswor_inclusion_frequencies() {
    let pop = line_population(10);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut hits = [0usize; 10];
    let draws = 100_000;
    for _ in 0..draws {
        let a = draw_srswor(&pop, 3, &mut rng).unwrap();
        assert!(a.inclusion_probs().iter().all(|&p| (p - 0.3).abs() < 1e-15));
        for &i in a.indices() {
            hits[i] += 1;
        }
    }
    for h in hits {
        assert!((h as f64 / draws as f64 - 0.3).abs() < 0.01, "{h}");
    }
}

#[test]
fn bernoulli_selection_rate() {
    let n = 100_000;
    let pop = line_population(n);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let b = draw_bernoulli(&pop, &vec![0.4; n], &mut rng).unwrap();
    assert!((b.len() as f64 / n as f64 - 0.4).abs() < 0.01, "{}", b.len());
}

#[test]
fn scenario_response_rates_near_four_tenths() {
    for name in ["S1", "S2", "S3"] {
        let spec = ScenarioSpec::named(name, 100_000).unwrap();
        let pop = generate_population(&spec, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let p = pop.selection_probs_true().unwrap();
        let mean = p.iter().sum::<f64>() / p.len() as f64;
        assert!((mean - 0.4).abs() <= 0.02, "{name}: {mean}");
    }
}

#[test]
fn small_stratum_gets_the_floor() {
    let alloc = allocate_stratified(&[50, 9950], 1000, 40).unwrap();
    assert_eq!(alloc[0], 40);
    assert_eq!(alloc.iter().sum::<usize>(), 1000);
}

proptest! {
    #[test]
    fn moments_decompose_mse(errors in prop::collection::vec(-5.0f64..5.0, 1..200)) {
        let (bias, var, mse) = moments(&errors);
        prop_assert!(var >= 0.0);
        prop_assert!((mse - (bias * bias + var)).abs() <= 1e-12 * mse.max(1.0));
    }

    #[test]
    fn domain_means_recombine_to_the_overall_mean(
        rows in prop::collection::vec((0.01f64..1.0, -10.0f64..10.0, any::<bool>()), 2..60),
    ) {
        let p: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let total: f64 = p.iter().sum();
        let p: Vec<f64> = p.iter().map(|v| v / total).collect();
        let y: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let d: Vec<bool> = rows.iter().map(|r| r.2).collect();
        prop_assume!(d.iter().any(|v| *v) && d.iter().any(|v| !*v));
        let not_d: Vec<bool> = d.iter().map(|v| !v).collect();
        let theta_hat: f64 = p.iter().zip(&y).map(|(p, y)| p * y).sum();
        let mass = |ind: &[bool]| p.iter().zip(ind).filter(|(_, i)| **i).map(|(p, _)| p).sum::<f64>();
        let recombined = mass(&d) * estimate_domain_mean(&p, &y, &d).unwrap()
            + mass(&not_d) * estimate_domain_mean(&p, &y, &not_d).unwrap();
        prop_assert!((recombined - theta_hat).abs() <= 1e-12 * theta_hat.abs().max(1.0));
        let everything = vec![true; p.len()];
        prop_assert!((estimate_domain_mean(&p, &y, &everything).unwrap() - theta_hat).abs() <= 1e-12 * theta_hat.abs().max(1.0));
    }

    #[test]
    fn allocation_is_exact_and_respects_the_floor(
        sizes in prop::collection::vec(40usize..2000, 1..12),
        extra in 0usize..500,
    ) {
        let h = sizes.len();
        let n = (40 * h + extra).min(sizes.iter().sum());
        let alloc = allocate_stratified(&sizes, n, 40).unwrap();
        prop_assert_eq!(alloc.iter().sum::<usize>(), n);
        for (a, s) in alloc.iter().zip(&sizes) {
            prop_assert!(*a >= 40 && a <= s);
        }
    }
}
