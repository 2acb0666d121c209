//! Sampling mechanisms: SRSWOR and stratified SRSWOR for the probability
//! sample, independent Bernoulli selection for the non-probability sample.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;

use crate::data::{Design, FinitePopulation, NonProbabilitySample, ProbabilitySample, StratumDesign};
use crate::error::{Error, Result};

fn outcomes_of(pop: &FinitePopulation) -> Result<&[f64]> {
    pop.outcomes()
        .ok_or_else(|| Error::Precondition("sampling needs population outcomes".into()))
}

/// SRSWOR of size `n` with π = n/N; indices come back in ascending order.
pub fn draw_srswor<R: Rng + ?Sized>(pop: &FinitePopulation, n: usize, rng: &mut R) -> Result<ProbabilitySample> {
    let big = pop.size();
    if n == 0 || n > big {
        return Err(Error::Precondition(format!("SRSWOR size must lie in 1..={big}, got {n}")));
    }
    let y = outcomes_of(pop)?;
    let mut idx = index::sample(rng, big, n).into_vec();
    idx.sort_unstable();
    let ys = idx.iter().map(|&i| y[i]).collect();
    ProbabilitySample::srswor(idx, ys, big)
}

/// Allocates `n` over strata of the given sizes: proportional shares with a
/// floor of `minimum` per stratum, largest remainders settling the rounding.
pub fn allocate_stratified(sizes: &[usize], n: usize, minimum: usize) -> Result<Vec<usize>> {
    let h = sizes.len();
    if h == 0 {
        return Err(Error::Precondition("no strata to allocate over".into()));
    }
    if minimum * h > n {
        return Err(Error::Precondition(format!(
            "sample size {n} cannot give {minimum} units to each of {h} strata"
        )));
    }
    let mut fixed = vec![false; h];
    loop {
        let remaining = n - fixed.iter().filter(|f| **f).count() * minimum;
        let free_total: usize = sizes.iter().zip(&fixed).filter(|(_, f)| !**f).map(|(s, _)| *s).sum();
        let mut alloc = vec![minimum; h];
        let mut rema = Vec::new();
        let mut assigned = 0;
        for k in 0..h {
            if fixed[k] {
                continue;
            }
            let share = remaining as f64 * sizes[k] as f64 / free_total as f64;
            alloc[k] = share.floor() as usize;
            assigned += alloc[k];
            rema.push((share - share.floor(), k));
        }
        rema.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for &(_, k) in rema.iter().take(remaining - assigned) {
            alloc[k] += 1;
        }
        let newly: Vec<usize> = (0..h).filter(|&k| !fixed[k] && alloc[k] < minimum).collect();
        if newly.is_empty() {
            for (k, (&a, &s)) in alloc.iter().zip(sizes).enumerate() {
                if a > s {
                    return Err(Error::Precondition(format!(
                        "stratum {k} has {s} units but is allocated {a}"
                    )));
                }
            }
            return Ok(alloc);
        }
        for k in newly {
            fixed[k] = true;
        }
    }
}

/// Stratified SRSWOR using the population's stratum labels.
pub fn draw_stratified_srswor<R: Rng + ?Sized>(
    pop: &FinitePopulation,
    n: usize,
    minimum: usize,
    rng: &mut R,
) -> Result<ProbabilitySample> {
    let labels = pop
        .strata()
        .ok_or_else(|| Error::Precondition("stratified sampling needs stratum labels".into()))?;
    let y = outcomes_of(pop)?;
    let mut members: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        members.entry(l).or_default().push(i);
    }
    let sizes: Vec<usize> = members.values().map(Vec::len).collect();
    let alloc = allocate_stratified(&sizes, n, minimum)?;
    let mut idx = Vec::with_capacity(n);
    let mut probs = Vec::with_capacity(n);
    let mut strata = Vec::with_capacity(members.len());
    for ((label, units), &n_h) in members.iter().zip(&alloc) {
        let pi = n_h as f64 / units.len() as f64;
        for k in index::sample(rng, units.len(), n_h).iter() {
            idx.push(units[k]);
            probs.push(pi);
        }
        strata.push(StratumDesign {
            label: *label,
            sample_size: n_h,
            population_size: units.len(),
        });
    }
    let mut order: Vec<usize> = (0..idx.len()).collect();
    order.sort_unstable_by_key(|&k| idx[k]);
    let idx_sorted: Vec<usize> = order.iter().map(|&k| idx[k]).collect();
    let probs_sorted = order.iter().map(|&k| probs[k]).collect();
    let ys = idx_sorted.iter().map(|&i| y[i]).collect();
    ProbabilitySample::new(idx_sorted, probs_sorted, ys, Design::StratifiedSrswor { strata })
}

/// Independent Bernoulli(π_B) selection; errors when nobody is selected.
pub fn draw_nonprob<R: Rng + ?Sized>(pop: &FinitePopulation, rng: &mut R) -> Result<NonProbabilitySample> {
    let probs = pop
        .selection_probs_true()
        .ok_or_else(|| Error::Precondition("non-probability sampling needs true selection probabilities".into()))?;
    draw_bernoulli(pop, probs, rng)
}

/// Independent Bernoulli selection with the given probabilities.
pub fn draw_bernoulli<R: Rng + ?Sized>(
    pop: &FinitePopulation,
    probs: &[f64],
    rng: &mut R,
) -> Result<NonProbabilitySample> {
    let y = outcomes_of(pop)?;
    let mut idx = Vec::new();
    for (i, &p) in probs.iter().enumerate() {
        // one uniform per unit keeps the stream aligned regardless of outcomes
        let u: f64 = rng.random();
        if u < p {
            idx.push(i);
        }
    }
    let ys = idx.iter().map(|&i| y[i]).collect();
    NonProbabilitySample::new(idx, ys)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pop(n: usize) -> FinitePopulation {
        let rows: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64]).collect();
        FinitePopulation::from_rows(&rows)
            .unwrap()
            .with_outcomes((0..n).map(|i| i as f64).collect())
            .unwrap()
    }

    #[test]
    fn proportional_allocation() {
        assert_eq!(allocate_stratified(&[1000, 9000], 1000, 40).unwrap(), vec![100, 900]);
        assert_eq!(allocate_stratified(&[50, 9950], 1000, 40).unwrap(), vec![40, 960]);
        assert_eq!(allocate_stratified(&[7], 3, 0).unwrap(), vec![3]);
        assert!(allocate_stratified(&[30, 9970], 1000, 40).is_err());
    }

    #[test]
    fn allocation_sums_to_n() {
        let sizes = [333, 1200, 45, 7000, 2422];
        let alloc = allocate_stratified(&sizes, 777, 40).unwrap();
        assert_eq!(alloc.iter().sum::<usize>(), 777);
        assert!(alloc.iter().all(|&a| a >= 40));
    }

    #[test]
    fn census_and_single_unit() {
        let p = pop(10);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let census = draw_srswor(&p, 10, &mut rng).unwrap();
        assert!(census.inclusion_probs().iter().all(|&v| v == 1.0));
        let one = draw_srswor(&p, 1, &mut rng).unwrap();
        assert_eq!(one.inclusion_probs(), &[0.1]);
        assert!(draw_srswor(&p, 11, &mut rng).is_err());
    }

    #[test]
    fn single_stratum_matches_srswor_probabilities() {
        let p = pop(20).with_strata(vec![3; 20]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = draw_stratified_srswor(&p, 5, 0, &mut rng).unwrap();
        assert!(a.inclusion_probs().iter().all(|&v| v == 0.25));
        assert_eq!(a.len(), 5);
    }

    #[test]
    fn degenerate_bernoulli() {
        let p = pop(8);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let all = draw_bernoulli(&p, &[1.0; 8], &mut rng).unwrap();
        assert_eq!(all.indices(), &[0, 1, 2, 3, 4, 5, 6, 7]);
        assert!(draw_bernoulli(&p, &[0.0; 8], &mut rng).is_err());
    }
}
