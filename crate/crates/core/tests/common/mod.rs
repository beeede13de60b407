#![allow(dead_code)]

use treematch::distance::DistanceMatrix;

/// Minimum total within-set distance over all partitions into sets with one
/// exposed and 1..=k controls or one control and 1..=k exposed. `None` when
/// no such partition exists.
pub fn brute_force_full_match(d: &[Vec<f64>], k: usize) -> Option<f64> {
    let ne = d.len();
    let nc = d.first().map_or(0, Vec::len);
    // units 0..ne exposed, ne..ne+nc controls
    let n = ne + nc;
    fn go(d: &[Vec<f64>], ne: usize, n: usize, k: usize, used: u32) -> Option<f64> {
        let Some(first) = (0..n).find(|&u| used & (1 << u) == 0) else {
            return Some(0.0);
        };
        let free: Vec<usize> = (first + 1..n).filter(|&u| used & (1 << u) == 0).collect();
        let mut best: Option<f64> = None;
        for mask in 1u32..(1 << free.len()) {
            let mut set = vec![first];
            set.extend(free.iter().enumerate().filter(|(b, _)| mask & (1 << b) != 0).map(|(_, &u)| u));
            let es: Vec<usize> = set.iter().copied().filter(|&u| u < ne).collect();
            let cs: Vec<usize> = set.iter().copied().filter(|&u| u >= ne).map(|u| u - ne).collect();
            let ok = !es.is_empty() && !cs.is_empty() && (es.len() == 1 || cs.len() == 1) && es.len() <= k && cs.len() <= k;
            if !ok {
                continue;
            }
            let cost: f64 = es.iter().flat_map(|&i| cs.iter().map(move |&j| d[i][j])).sum();
            let bits = set.iter().fold(used, |acc, &u| acc | (1 << u));
            if let Some(rest) = go(d, ne, n, k, bits) {
                let total = cost + rest;
                if best.is_none_or(|b| total < b) {
                    best = Some(total);
                }
            }
        }
        best
    }
    go(d, ne, n, k, 0)
}

pub fn matrix(values: &[Vec<f64>]) -> DistanceMatrix {
    DistanceMatrix::from_rows(values).unwrap()
}
