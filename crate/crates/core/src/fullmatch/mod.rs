//! Optimal full matching under a 1:k / k:1 set-shape restriction.
//!
//! The match is solved as a min-cost b-flow on a network with one node per
//! exposed unit, one node per control and a balancing hub. Every exposed unit
//! supplies one unit of flow and every control absorbs one; exposed nodes may
//! draw up to `k - 1` extra units from the hub and controls may return up to
//! `k - 1` to it. A flow therefore picks a set of exposed-control edges in
//! which every unit has between 1 and `k` partners. With non-negative costs
//! such an edge set can be pruned to a star forest without raising its cost,
//! and the stars are exactly the matched sets.

mod flow;

pub use flow::{FlowError, MinCostFlow};

use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};

use crate::balance::BalanceTable;
use crate::distance::DistanceMatrix;
use crate::{Error, Result};

pub const MAX_K: usize = 10;
pub const COST_SCALE: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchedSet {
    pub exposed: Vec<usize>,
    pub controls: Vec<usize>,
}

impl MatchedSet {
    pub fn len(&self) -> usize {
        self.exposed.len() + self.controls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn has_valid_shape(&self, k: usize) -> bool {
        let (ne, nc) = (self.exposed.len(), self.controls.len());
        ne >= 1 && nc >= 1 && (ne == 1 || nc == 1) && ne <= k && nc <= k
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FullMatch {
    pub sets: Vec<MatchedSet>,
    pub k: usize,
    pub total_distance: f64,
    pub unmatched: Vec<usize>,
}

impl FullMatch {
    pub fn n_exposed(&self) -> usize {
        self.sets.iter().map(|s| s.exposed.len()).sum()
    }

    pub fn n_controls(&self) -> usize {
        self.sets.iter().map(|s| s.controls.len()).sum()
    }

    pub fn exposed_units(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.sets.iter().flat_map(|s| s.exposed.iter().copied()).collect();
        v.sort_unstable();
        v
    }

    pub fn control_units(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.sets.iter().flat_map(|s| s.controls.iter().copied()).collect();
        v.sort_unstable();
        v
    }

    /// Writes `set,unit,role` lines.
    pub fn to_delimited(&self, label: impl Fn(usize) -> String, delimiter: char) -> String {
        let mut out = format!("set{d}unit{d}role\n", d = delimiter);
        for (t, set) in self.sets.iter().enumerate() {
            for &u in &set.exposed {
                out.push_str(&format!("{}{d}{}{d}exposed\n", t + 1, label(u), d = delimiter));
            }
            for &u in &set.controls {
                out.push_str(&format!("{}{d}{}{d}control\n", t + 1, label(u), d = delimiter));
            }
        }
        out
    }
}

fn scaled_cost(d: f64) -> Result<i64> {
    let c = (d * COST_SCALE).round_ties_even();
    // leave headroom for path sums inside the solver
    if !(0.0..=1e12).contains(&c) {
        return Err(Error::OutOfRange(format!("distance {d} too large to scale")));
    }
    Ok(c as i64)
}

fn check_k(ne: usize, nc: usize, k: usize) -> Result<()> {
    if !(1..=MAX_K).contains(&k) {
        return Err(Error::Input(format!("k must lie in 1..={MAX_K}, got {k}")));
    }
    if ne == 0 || nc == 0 {
        return Err(Error::Input(format!("cannot match {ne} exposed with {nc} controls")));
    }
    if ne > k * nc {
        return Err(Error::Infeasible(format!(
            "exposed side: {ne} exposed units exceed {k} per control for {nc} controls"
        )));
    }
    if nc > k * ne {
        return Err(Error::Infeasible(format!(
            "control side: {nc} controls exceed {k} per exposed unit for {ne} exposed units"
        )));
    }
    Ok(())
}

fn flow_error(e: FlowError) -> Error {
    match e {
        FlowError::Infeasible(v) => Error::Infeasible(format!("no feasible flow from network node {v}")),
        FlowError::Unbalanced => Error::Infeasible("unbalanced supplies".into()),
    }
}

/// The matching network for one distance matrix. Solving at a larger `k`
/// starts from the optimum at the previous one.
struct Network<'a> {
    d: &'a DistanceMatrix,
    g: MinCostFlow,
    hub_arcs: Vec<usize>,
    k: Option<usize>,
}

impl<'a> Network<'a> {
    fn new(d: &'a DistanceMatrix) -> Result<Self> {
        let (ne, nc) = (d.nrows(), d.ncols());
        let hub = ne + nc;
        let mut g = MinCostFlow::new(ne + nc + 1);
        // exposed-control arcs first, row by row, so arc 2 * (i * nc + j) is (i, j)
        for i in 0..ne {
            for (j, &v) in d.row(i).iter().enumerate() {
                g.add_arc(i, ne + j, 1, scaled_cost(v)?);
            }
        }
        let mut hub_arcs = Vec::with_capacity(ne + nc);
        for i in 0..ne {
            hub_arcs.push(g.add_arc(hub, i, 0, 0));
        }
        for j in 0..nc {
            hub_arcs.push(g.add_arc(ne + j, hub, 0, 0));
        }
        Ok(Self { d, g, hub_arcs, k: None })
    }

    fn solve(&mut self, k: usize) -> Result<FullMatch> {
        let d = self.d;
        let (ne, nc) = (d.nrows(), d.ncols());
        check_k(ne, nc, k)?;
        if self.k.is_some_and(|prev| prev > k) {
            *self = Network::new(d)?;
        }
        let prev = self.k.unwrap_or(1);
        for &a in &self.hub_arcs {
            self.g.raise_capacity(a, (k - prev) as i64);
        }
        if self.k.is_some() {
            self.g.reoptimize().map_err(flow_error)?;
        } else {
            let mut supply = vec![1i64; ne];
            supply.extend(std::iter::repeat_n(-1i64, nc));
            supply.push(nc as i64 - ne as i64);
            self.g.solve(&supply).map_err(flow_error)?;
        }
        self.k = Some(k);

        let mut edges: Vec<(usize, usize)> = Vec::new();
        for i in 0..ne {
            for j in 0..nc {
                if self.g.flow(2 * (i * nc + j)) > 0 {
                    edges.push((i, j));
                }
            }
        }
        let sets = edges_to_sets(ne, nc, edges);
        let total_distance = sets
            .iter()
            .map(|(es, cs)| es.iter().flat_map(|&i| cs.iter().map(move |&j| d.get(i, j))).sum::<f64>())
            .sum();
        let sets = sets
            .into_iter()
            .map(|(es, cs)| MatchedSet {
                exposed: es.into_iter().map(|i| d.rows[i]).collect(),
                controls: cs.into_iter().map(|j| d.cols[j]).collect(),
            })
            .collect();
        Ok(FullMatch { sets, k, total_distance, unmatched: Vec::new() })
    }
}

/// Minimum-distance full match in which every set has one exposed unit and
/// at most `k` controls or one control and at most `k` exposed units.
pub fn optimal_full_match(d: &DistanceMatrix, k: usize) -> Result<FullMatch> {
    check_k(d.nrows(), d.ncols(), k)?;
    Network::new(d)?.solve(k)
}

/// Prunes an edge cover to a star forest and groups it into sets, ordered by
/// their first exposed unit.
fn edges_to_sets(ne: usize, nc: usize, mut edges: Vec<(usize, usize)>) -> Vec<(Vec<usize>, Vec<usize>)> {
    let mut deg_e = vec![0usize; ne];
    let mut deg_c = vec![0usize; nc];
    for &(i, j) in &edges {
        deg_e[i] += 1;
        deg_c[j] += 1;
    }
    edges.retain(|&(i, j)| {
        if deg_e[i] > 1 && deg_c[j] > 1 {
            deg_e[i] -= 1;
            deg_c[j] -= 1;
            false
        } else {
            true
        }
    });

    let mut owner_e = vec![usize::MAX; ne];
    let mut owner_c = vec![usize::MAX; nc];
    let mut sets: Vec<(Vec<usize>, Vec<usize>)> = Vec::new();
    for &(i, j) in &edges {
        let t = if owner_e[i] != usize::MAX {
            owner_e[i]
        } else if owner_c[j] != usize::MAX {
            owner_c[j]
        } else {
            sets.push((Vec::new(), Vec::new()));
            sets.len() - 1
        };
        if owner_e[i] == usize::MAX {
            owner_e[i] = t;
            sets[t].0.push(i);
        }
        if owner_c[j] == usize::MAX {
            owner_c[j] = t;
            sets[t].1.push(j);
        }
    }
    for (es, cs) in &mut sets {
        es.sort_unstable();
        cs.sort_unstable();
    }
    sets.sort_by_key(|(es, cs)| (es[0], cs[0]));
    sets
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KCandidate {
    pub k: usize,
    pub feasible: bool,
    pub total_distance: Option<f64>,
    pub n_weak: Option<usize>,
    pub max_asd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchDiagnostics {
    pub k: usize,
    pub balance: BalanceTable,
    /// Covariate columns with post-match ASD in (0.1, 0.2).
    pub n_weak: usize,
    pub max_asd: f64,
    pub failed: bool,
    pub candidates: Vec<KCandidate>,
}

/// Matches at every feasible `k` in `k_range` and keeps the one with the
/// fewest weakly imbalanced covariates, preferring smaller `k` on ties.
/// With `stop_early`, the scan ends at the first k leaving no weakly
/// imbalanced covariate. The selection is unchanged (no later k can win the
/// tie-break) but `candidates` then lists only the k values visited.
pub fn select_k<F>(
    d: &DistanceMatrix,
    k_range: RangeInclusive<usize>,
    stop_early: bool,
    mut evaluate: F,
) -> Result<(FullMatch, MatchDiagnostics)>
where
    F: FnMut(&FullMatch) -> Result<BalanceTable>,
{
    if k_range.is_empty() || *k_range.start() < 1 || *k_range.end() > MAX_K {
        return Err(Error::Input(format!("k range must lie within 1..={MAX_K}")));
    }
    let mut candidates = Vec::new();
    let mut best: Option<(FullMatch, BalanceTable, usize)> = None;
    let mut last_err = None;
    let mut net = Network::new(d)?;
    for k in k_range {
        let m = match net.solve(k) {
            Ok(m) => m,
            Err(Error::Infeasible(msg)) => {
                candidates.push(KCandidate { k, feasible: false, total_distance: None, n_weak: None, max_asd: None });
                last_err = Some(msg);
                continue;
            }
            Err(e) => return Err(e),
        };
        let table = evaluate(&m)?;
        let n_weak = table.n_weak_after();
        candidates.push(KCandidate {
            k,
            feasible: true,
            total_distance: Some(m.total_distance),
            n_weak: Some(n_weak),
            max_asd: Some(table.max_asd_after()),
        });
        if best.as_ref().is_none_or(|b| n_weak < b.2) {
            best = Some((m, table, n_weak));
        }
        if stop_early && n_weak == 0 {
            break;
        }
    }
    let Some((m, balance, n_weak)) = best else {
        return Err(Error::Infeasible(format!(
            "no feasible k: {}",
            last_err.unwrap_or_else(|| "empty range".into())
        )));
    };
    let max_asd = balance.max_asd_after();
    let diag = MatchDiagnostics { k: m.k, balance, n_weak, max_asd, failed: max_asd >= crate::balance::SEVERE, candidates };
    Ok((m, diag))
}
