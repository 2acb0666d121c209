//! Regenerates the committed fixture files.
//!
//! Usage: generate_fixtures <estimate-fixture-dir> <plasmode-population-csv>

use std::fs::File;

use mbcel::io;
use mbcel::sim::{generate_population, plasmode, sampling, ScenarioSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> mbcel::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let (dir, plasmode_csv) = match args.as_slice() {
        [_, d, p] => (std::path::PathBuf::from(d), p.clone()),
        _ => {
            eprintln!("usage: generate_fixtures <estimate-fixture-dir> <plasmode-population-csv>");
            std::process::exit(2);
        }
    };
    std::fs::create_dir_all(&dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    let pop = generate_population(&ScenarioSpec::s2(200), &mut rng)?;
    let a = sampling::draw_srswor(&pop, 40, &mut rng)?;
    let b = sampling::draw_nonprob(&pop, &mut rng)?;
    let covariates_only = mbcel::FinitePopulation::new(pop.rows().flatten().copied().collect(), pop.covariate_names().to_vec())?;
    io::write_population_csv(File::create(dir.join("population.csv"))?, &covariates_only)?;
    io::write_probability_sample_csv(File::create(dir.join("probability.csv"))?, &a)?;
    io::write_nonprobability_sample_csv(File::create(dir.join("nonprobability.csv"))?, &b)?;

    let stand_in = plasmode::synthetic_population(10_000, 2024)?;
    io::write_population_csv(File::create(&plasmode_csv)?, &stand_in)?;
    Ok(())
}
