//! Integer min-cost b-flow by successive shortest augmenting paths with
//! node potentials (Dijkstra on reduced costs).

use std::cmp::Reverse;
use std::collections::BinaryHeap;

#[derive(Debug, Clone, Copy)]
struct Arc {
    to: usize,
    cap: i64,
    cost: i64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FlowError {
    /// Supplies do not sum to zero.
    Unbalanced,
    /// Some supply could not reach any demand; holds the stranded node.
    Infeasible(usize),
}

#[derive(Debug, Clone, Default)]
pub struct MinCostFlow {
    arcs: Vec<Arc>,
    adj: Vec<Vec<usize>>,
    original_cap: Vec<i64>,
    excess: Vec<i64>,
    potential: Vec<i64>,
    total: i64,
}

impl MinCostFlow {
    pub fn new(nodes: usize) -> Self {
        Self {
            arcs: Vec::new(),
            adj: vec![Vec::new(); nodes],
            original_cap: Vec::new(),
            excess: vec![0; nodes],
            potential: vec![0; nodes],
            total: 0,
        }
    }

    pub fn nodes(&self) -> usize {
        self.adj.len()
    }

    /// Adds `u -> v`; costs must be non-negative. Returns the arc id.
    pub fn add_arc(&mut self, u: usize, v: usize, cap: i64, cost: i64) -> usize {
        debug_assert!(cost >= 0 && cap >= 0);
        let id = self.arcs.len();
        self.arcs.push(Arc { to: v, cap, cost });
        self.arcs.push(Arc { to: u, cap: 0, cost: -cost });
        self.adj[u].push(id);
        self.adj[v].push(id + 1);
        self.original_cap.push(cap);
        id
    }

    pub fn flow(&self, arc: usize) -> i64 {
        self.original_cap[arc / 2] - self.arcs[arc].cap
    }

    /// Routes `supply[v]` units out of every node with positive supply into
    /// nodes with negative supply at minimum total cost.
    pub fn solve(&mut self, supply: &[i64]) -> Result<i64, FlowError> {
        if supply.len() != self.nodes() || supply.iter().sum::<i64>() != 0 {
            return Err(FlowError::Unbalanced);
        }
        self.excess = supply.to_vec();
        self.augment()
    }

    /// Raises the capacity of a forward arc after a successful `solve` and
    /// restores optimality from the current flow. Call `reoptimize` once all
    /// capacities are raised.
    pub fn raise_capacity(&mut self, arc: usize, extra: i64) {
        debug_assert!(arc.is_multiple_of(2) && extra >= 0);
        self.arcs[arc].cap += extra;
        self.original_cap[arc / 2] += extra;
        let from = self.arcs[arc ^ 1].to;
        let to = self.arcs[arc].to;
        let reduced = self.arcs[arc].cost + self.potential[from] - self.potential[to];
        if reduced < 0 {
            // saturate so no residual arc has negative reduced cost
            let delta = self.arcs[arc].cap;
            self.arcs[arc].cap = 0;
            self.arcs[arc ^ 1].cap += delta;
            self.excess[from] -= delta;
            self.excess[to] += delta;
            self.total += delta * self.arcs[arc].cost;
        }
    }

    pub fn reoptimize(&mut self) -> Result<i64, FlowError> {
        self.augment()
    }

    fn augment(&mut self) -> Result<i64, FlowError> {
        let n = self.nodes();
        let mut dist = vec![i64::MAX; n];
        let mut prev = vec![usize::MAX; n];
        let mut done = vec![false; n];
        let mut touched: Vec<usize> = Vec::with_capacity(n);
        let mut heap = BinaryHeap::new();
        let (excess, potential) = (&mut self.excess, &mut self.potential);

        for s in 0..n {
            while excess[s] > 0 {
                for &v in &touched {
                    dist[v] = i64::MAX;
                    prev[v] = usize::MAX;
                    done[v] = false;
                }
                touched.clear();
                heap.clear();
                dist[s] = 0;
                touched.push(s);
                heap.push(Reverse((0i64, s)));
                let mut target = None;
                while let Some(Reverse((d, u))) = heap.pop() {
                    if done[u] {
                        continue;
                    }
                    done[u] = true;
                    if excess[u] < 0 {
                        target = Some(u);
                        break;
                    }
                    let pu = potential[u];
                    for &a in &self.adj[u] {
                        let arc = self.arcs[a];
                        if arc.cap == 0 || done[arc.to] {
                            continue;
                        }
                        let nd = d + arc.cost + pu - potential[arc.to];
                        if nd < dist[arc.to] {
                            if dist[arc.to] == i64::MAX {
                                touched.push(arc.to);
                            }
                            dist[arc.to] = nd;
                            prev[arc.to] = a;
                            heap.push(Reverse((nd, arc.to)));
                        }
                    }
                }
                let t = target.ok_or(FlowError::Infeasible(s))?;
                let dt = dist[t];
                for &v in &touched {
                    if done[v] {
                        potential[v] += dist[v] - dt;
                    }
                }
                let mut delta = excess[s].min(-excess[t]);
                let mut v = t;
                while v != s {
                    let a = prev[v];
                    delta = delta.min(self.arcs[a].cap);
                    v = self.arcs[a ^ 1].to;
                }
                let mut v = t;
                while v != s {
                    let a = prev[v];
                    self.arcs[a].cap -= delta;
                    self.arcs[a ^ 1].cap += delta;
                    self.total += delta * self.arcs[a].cost;
                    v = self.arcs[a ^ 1].to;
                }
                excess[s] -= delta;
                excess[t] += delta;
            }
        }
        Ok(self.total)
    }
}
