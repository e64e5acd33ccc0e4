mod common;

use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::random_instrument;
use signalrho::discrete::{
    brute_force_resolved, evolve_n, signal_distribution, stationary_resolved, step, FnFamily, ResolvedState,
    SignalTable,
};
use signalrho::model::random_density;
use signalrho::signals::{jump_time, Charge, LastOutcome};
use signalrho::{InstrumentSet, Signal, SignalRule};

fn family(sets: Vec<InstrumentSet>) -> FnFamily<impl Fn(Signal) -> Option<InstrumentSet> + Sync> {
    let dim = sets[0].dim();
    FnFamily::new(dim, move |y| {
        let h = match y {
            Signal::Int(v) => v,
            Signal::Pair(a, b) => 5 * a + b,
        };
        Some(sets[h.rem_euclid(sets.len() as i64) as usize].clone())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn recursion_matches_enumeration(seed in any::<u64>(), dim in 2usize..=3, n in 1usize..=5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels = [0, 1, -1];
        let sets: Vec<InstrumentSet> = (0..2).map(|_| random_instrument(&mut rng, dim, &labels)).collect();
        let fam = family(sets);
        let rho0 = random_density(&mut rng, dim);
        let rule = Charge::new([(1, 1), (-1, -2)], 0.5, (-20, 20), 0).unwrap();
        let start = ResolvedState::new(rho0.clone(), rule.initial());
        let fast = evolve_n(&start, &fam, &rule, n).unwrap();
        let slow = brute_force_resolved(&rho0, &fam, &rule, n).unwrap();
        prop_assert!(fast.max_difference(&slow) <= 1e-12);
    }

    #[test]
    fn resolved_state_stays_a_state(seed in any::<u64>(), n in 1usize..=12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels = [0, 1];
        let sets: Vec<InstrumentSet> = (0..3).map(|_| random_instrument(&mut rng, 2, &labels)).collect();
        let fam = family(sets);
        let rule = jump_time([1], 1, 0.1).unwrap();
        let start = ResolvedState::new(random_density(&mut rng, 2), rule.initial());
        let s = evolve_n(&start, &fam, &rule, n).unwrap();
        prop_assert!((s.total_trace() - 1.0).abs() <= 1e-12);
        prop_assert!(s.min_block_eigenvalue() >= -1e-12);
        prop_assert!(signal_distribution(&s).deviation() <= 1e-12);
    }
}

#[test]
fn stationary_state_is_fixed_under_the_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let labels = [0, 1, -1];
    let entries: BTreeMap<Signal, InstrumentSet> = labels
        .iter()
        .map(|&l| (Signal::Int(l), random_instrument(&mut rng, 2, &labels)))
        .collect();
    let table = SignalTable::new(entries, None).unwrap();
    let rule = LastOutcome::new(labels, 0).unwrap();
    let ss = stationary_resolved(&table, &rule, 16).unwrap();
    let next = step(&ss, &table, &rule).unwrap();
    assert!(next.max_difference(&ss) <= 1e-10);
    assert!((ss.total_trace() - 1.0).abs() <= 1e-10);
    assert!(ss.min_block_eigenvalue() >= -1e-10);
}
