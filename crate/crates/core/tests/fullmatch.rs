mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;
use treematch::balance::BalanceTable;
use treematch::fullmatch::{optimal_full_match, select_k};
use treematch::Error;

use common::{brute_force_full_match, matrix};

fn instance(max_units: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1..max_units, 1..max_units)
        .prop_filter("at most max_units units", move |(ne, nc)| ne + nc <= max_units)
        .prop_flat_map(|(ne, nc)| prop::collection::vec(prop::collection::vec(0u8..20, nc), ne))
        .prop_map(|rows| rows.into_iter().map(|r| r.into_iter().map(f64::from).collect()).collect())
}

fn dummy_table(_: &treematch::fullmatch::FullMatch) -> treematch::Result<BalanceTable> {
    BalanceTable::new(&["x".to_string()], &[1.0], &[0.0], &[0.0])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn matches_brute_force(d in instance(7), k in 1usize..=3) {
        let oracle = brute_force_full_match(&d, k);
        match optimal_full_match(&matrix(&d), k) {
            Ok(m) => {
                prop_assert_eq!(Some(m.total_distance), oracle);
                let ne = d.len();
                let nc = d[0].len();
                let mut seen_e = BTreeSet::new();
                let mut seen_c = BTreeSet::new();
                for s in &m.sets {
                    prop_assert!(s.has_valid_shape(k), "{:?}", s);
                    for &e in &s.exposed {
                        prop_assert!(seen_e.insert(e));
                    }
                    for &c in &s.controls {
                        prop_assert!(seen_c.insert(c));
                    }
                }
                prop_assert_eq!(seen_e.len(), ne);
                prop_assert_eq!(seen_c.len(), nc);
            }
            Err(Error::Infeasible(_)) => prop_assert_eq!(oracle, None),
            Err(e) => prop_assert!(false, "unexpected error {e}"),
        }
    }

    #[test]
    fn cost_non_increasing_in_k(d in instance(9)) {
        let mut last = f64::INFINITY;
        for k in 1..=4 {
            if let Ok(m) = optimal_full_match(&matrix(&d), k) {
                prop_assert!(m.total_distance <= last + 1e-9);
                last = m.total_distance;
            }
        }
    }

    #[test]
    fn permuting_controls_keeps_cost(d in instance(8), k in 1usize..=3, seed in any::<u64>()) {
        let nc = d[0].len();
        let mut perm: Vec<usize> = (0..nc).collect();
        let mut s = seed;
        for i in (1..nc).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (s >> 33) as usize % (i + 1));
        }
        let shuffled: Vec<Vec<f64>> = d.iter().map(|r| perm.iter().map(|&j| r[j]).collect()).collect();
        let a = optimal_full_match(&matrix(&d), k).map(|m| m.total_distance).ok();
        let b = optimal_full_match(&matrix(&shuffled), k).map(|m| m.total_distance).ok();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn scanning_k_agrees_with_separate_solves(d in instance(12)) {
        let (_, diag) = match select_k(&matrix(&d), 1..=5, false, dummy_table) {
            Ok(r) => r,
            Err(_) => return Ok(()),
        };
        for c in diag.candidates {
            let fresh = optimal_full_match(&matrix(&d), c.k).ok().map(|m| m.total_distance);
            prop_assert_eq!(c.total_distance, fresh, "k = {}", c.k);
        }
    }
}

#[test]
fn real_valued_costs_within_tolerance() {
    let d = vec![vec![0.123456, 1.5, 2.25], vec![0.75, 0.333333, 1.0]];
    let m = optimal_full_match(&matrix(&d), 2).unwrap();
    let oracle = brute_force_full_match(&d, 2).unwrap();
    assert!((m.total_distance - oracle).abs() <= 1e-6 * oracle.max(1.0));
}

#[test]
fn early_stop_keeps_selection() {
    let d: Vec<Vec<f64>> = (0..4).map(|i| (0..9).map(|j| ((i * 7 + j * 3) % 11) as f64).collect()).collect();
    let (full, _) = select_k(&matrix(&d), 1..=10, false, dummy_table).unwrap();
    let (early, diag) = select_k(&matrix(&d), 1..=10, true, dummy_table).unwrap();
    assert_eq!(full, early);
    // 9 controls over 4 exposed needs k >= 3, which is also the first balanced k here
    assert_eq!(diag.candidates.len(), 3);
    assert_eq!(early.k, 3);
}
