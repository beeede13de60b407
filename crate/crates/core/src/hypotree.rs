//! Tree-structured null hypotheses: consistency enumeration, level
//! constraints, level allocation and the gated testing-in-order driver.
//!
//! Every node carries the null "the exposure at this node has additive
//! effect `tau0` relative to no activity". If a node's null is false, at
//! least one child null must be false. A configuration of truth values is
//! therefore consistent when every false internal node has a false child.
//!
//! Testing proceeds from the root; a node is tested only after its parent is
//! rejected. The nulls that can be falsely rejected in one configuration are
//! the true nodes whose ancestors are all false, so the union bound gives one
//! constraint `sum(levels over that set) <= alpha` per configuration.

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::cohort::Membership;
use crate::error::{Error, Result};

pub type NodeId = usize;

/// Upper bound on tree size for exhaustive enumeration.
pub const MAX_ENUMERATION_NODES: usize = 25;

const PAPER_TREE: &str = include_str!("../data/paper_tree.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisNode {
    pub id: NodeId,
    pub label: String,
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
    pub tau0: f64,
    pub membership: Membership,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExposureTree {
    nodes: Vec<HypothesisNode>,
    root: NodeId,
}

#[derive(Debug, Clone, Deserialize)]
struct TreeFile {
    node: Vec<NodeSpec>,
}

#[derive(Debug, Clone, Deserialize)]
struct NodeSpec {
    label: String,
    parent: Option<String>,
    membership: Membership,
    #[serde(default)]
    tau0: f64,
}

impl ExposureTree {
    /// Builds a tree from `(label, parent label, membership, tau0)` rows.
    pub fn from_parts(parts: Vec<(String, Option<String>, Membership, f64)>) -> Result<Self> {
        let n = parts.len();
        if n == 0 {
            return Err(Error::Tree("no nodes".into()));
        }
        let mut nodes: Vec<HypothesisNode> = Vec::with_capacity(n);
        for (i, (label, _, membership, tau0)) in parts.iter().enumerate() {
            if nodes.iter().any(|m| &m.label == label) {
                return Err(Error::Tree(format!("duplicate label `{label}`")));
            }
            if !tau0.is_finite() {
                return Err(Error::Tree(format!("node `{label}` has non-finite tau0")));
            }
            nodes.push(HypothesisNode {
                id: i,
                label: label.clone(),
                parent: None,
                children: Vec::new(),
                tau0: *tau0,
                membership: membership.clone(),
            });
        }
        let mut roots = Vec::new();
        for (i, (label, parent, ..)) in parts.iter().enumerate() {
            match parent {
                None => roots.push(i),
                Some(p) => {
                    let pid = nodes
                        .iter()
                        .position(|m| &m.label == p)
                        .ok_or_else(|| Error::Tree(format!("node `{label}` names unknown parent `{p}`")))?;
                    if pid == i {
                        return Err(Error::Tree(format!("node `{label}` is its own parent")));
                    }
                    nodes[i].parent = Some(pid);
                    nodes[pid].children.push(i);
                }
            }
        }
        if roots.len() != 1 {
            return Err(Error::Tree(format!("expected exactly one root, found {}", roots.len())));
        }
        let tree = Self { nodes, root: roots[0] };
        if tree.breadth_first().len() != n {
            return Err(Error::Tree("tree is not connected or contains a cycle".into()));
        }
        Ok(tree)
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let file: TreeFile = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_parts(file.node.into_iter().map(|n| (n.label, n.parent, n.membership, n.tau0)).collect())
    }

    /// The seven-node hierarchy from any activity down to collision sports.
    pub fn paper_default() -> Self {
        Self::from_toml(PAPER_TREE).expect("shipped tree is valid")
    }

    pub fn single(label: &str) -> Self {
        Self::from_parts(vec![(label.to_string(), None, Membership::AnyActivity, 0.0)]).expect("valid")
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn node(&self, id: NodeId) -> &HypothesisNode {
        &self.nodes[id]
    }

    pub fn nodes(&self) -> &[HypothesisNode] {
        &self.nodes
    }

    pub fn find(&self, label: &str) -> Option<NodeId> {
        self.nodes.iter().position(|n| n.label == label)
    }

    pub fn set_tau0(&mut self, tau0: f64) {
        for n in &mut self.nodes {
            n.tau0 = tau0;
        }
    }

    /// Root first, then by depth, siblings in declaration order.
    pub fn breadth_first(&self) -> Vec<NodeId> {
        let mut order = Vec::with_capacity(self.nodes.len());
        let mut seen = vec![false; self.nodes.len()];
        let mut queue = VecDeque::from([self.root]);
        while let Some(v) = queue.pop_front() {
            if std::mem::replace(&mut seen[v], true) {
                continue;
            }
            order.push(v);
            queue.extend(self.nodes[v].children.iter().copied());
        }
        order
    }

    pub fn ancestors(&self, mut v: NodeId) -> Vec<NodeId> {
        let mut out = Vec::new();
        while let Some(p) = self.nodes[v].parent {
            out.push(p);
            v = p;
        }
        out
    }

    pub fn descendants(&self, v: NodeId) -> Vec<NodeId> {
        let mut out = Vec::new();
        let mut stack: Vec<NodeId> = self.nodes[v].children.clone();
        while let Some(u) = stack.pop() {
            out.push(u);
            stack.extend(self.nodes[u].children.iter().copied());
        }
        out.sort_unstable();
        out
    }

    fn check_capacity(&self) -> Result<()> {
        if self.len() > MAX_ENUMERATION_NODES {
            return Err(Error::Capacity(format!(
                "{} nodes exceeds the enumeration bound of {MAX_ENUMERATION_NODES}",
                self.len()
            )));
        }
        Ok(())
    }
}

/// Truth value of each node's null (`true` = null holds).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TruthConfiguration {
    pub truth: Vec<bool>,
}

impl TruthConfiguration {
    pub fn is_consistent(&self, tree: &ExposureTree) -> bool {
        tree.nodes().iter().all(|n| {
            self.truth[n.id] || n.children.is_empty() || n.children.iter().any(|&c| !self.truth[c])
        })
    }

    /// True nulls that can be tested, i.e. true nodes whose ancestors are all false.
    pub fn exposed_true_nulls(&self, tree: &ExposureTree) -> Vec<NodeId> {
        (0..tree.len())
            .filter(|&v| self.truth[v] && tree.ancestors(v).iter().all(|&a| !self.truth[a]))
            .collect()
    }
}

pub fn enumerate_consistent_configs(tree: &ExposureTree) -> Result<Vec<TruthConfiguration>> {
    tree.check_capacity()?;
    let n = tree.len();
    let child_masks: Vec<u32> =
        tree.nodes().iter().map(|node| node.children.iter().fold(0u32, |m, &c| m | (1 << c))).collect();
    let mut out = Vec::new();
    for mask in 0u32..(1u32 << n) {
        let consistent = (0..n).all(|v| mask & (1 << v) != 0 || child_masks[v] == 0 || child_masks[v] & !mask != 0);
        if consistent {
            out.push(TruthConfiguration { truth: (0..n).map(|v| mask & (1 << v) != 0).collect() });
        }
    }
    Ok(out)
}

fn maximal(mut sets: Vec<u32>) -> Vec<u32> {
    sets.sort_unstable_by_key(|s| std::cmp::Reverse(s.count_ones()));
    sets.dedup();
    let mut keep: Vec<u32> = Vec::with_capacity(sets.len());
    for s in sets {
        if !keep.iter().any(|&k| k & s == s) {
            keep.push(s);
        }
    }
    keep
}

/// Maximal testable-true sets for the subtree of `v` when `v` and all its
/// ancestors are false.
fn false_branch_sets(tree: &ExposureTree, v: NodeId) -> Vec<u32> {
    let children = &tree.node(v).children;
    if children.is_empty() {
        return vec![0];
    }
    // (mask, some child false so far)
    let mut acc: Vec<(u32, bool)> = vec![(0, false)];
    for &c in children {
        let when_false = false_branch_sets(tree, c);
        let mut next = Vec::with_capacity(acc.len() * (when_false.len() + 1));
        for &(m, any_false) in &acc {
            next.push((m | (1 << c), any_false));
            next.extend(when_false.iter().map(|&f| (m | f, true)));
        }
        let (with, without): (Vec<_>, Vec<_>) = next.into_iter().partition(|&(_, f)| f);
        acc = maximal(with.into_iter().map(|(m, _)| m).collect())
            .into_iter()
            .map(|m| (m, true))
            .chain(maximal(without.into_iter().map(|(m, _)| m).collect()).into_iter().map(|m| (m, false)))
            .collect();
    }
    maximal(acc.into_iter().filter(|&(_, f)| f).map(|(m, _)| m).collect())
}

fn canonical(mut sets: Vec<Vec<NodeId>>) -> Vec<Vec<NodeId>> {
    for s in &mut sets {
        s.sort_unstable();
    }
    sets.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
    sets.dedup();
    sets
}

fn mask_to_ids(mask: u32) -> Vec<NodeId> {
    (0..32).filter(|b| mask & (1 << b) != 0).collect()
}

/// Maximal sets of simultaneously testable true nulls over all consistent
/// configurations, in canonical order (size, then lexicographic ids).
pub fn derive_constraints(tree: &ExposureTree) -> Result<Vec<Vec<NodeId>>> {
    tree.check_capacity()?;
    let root = tree.root();
    let mut sets = false_branch_sets(tree, root);
    sets.push(1 << root);
    Ok(canonical(maximal(sets).into_iter().map(mask_to_ids).collect()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AllocationPolicy {
    /// Each node gets `alpha / K`, `K` the largest constraint containing it.
    #[default]
    KPlusOne,
    /// Progressive filling that maximizes the smallest level.
    MaxMin,
}

impl fmt::Display for AllocationPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AllocationPolicy::KPlusOne => "k-plus-one",
            AllocationPolicy::MaxMin => "max-min",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaAllocation {
    pub alpha: f64,
    pub policy: AllocationPolicy,
    pub levels: Vec<f64>,
    pub constraints: Vec<Vec<NodeId>>,
}

impl AlphaAllocation {
    pub fn level(&self, v: NodeId) -> f64 {
        self.levels[v]
    }

    pub fn constraint_sum(&self, set: &[NodeId]) -> f64 {
        set.iter().map(|&i| self.levels[i]).sum()
    }

    pub fn satisfies_constraints(&self) -> bool {
        self.constraints.iter().all(|s| self.constraint_sum(s) <= self.alpha + 1e-12)
    }
}

/// Allocates per-node levels over `n_nodes` nodes subject to every
/// constraint set summing to at most `alpha`.
pub fn allocate_alpha(
    constraints: &[Vec<NodeId>],
    n_nodes: usize,
    alpha: f64,
    policy: AllocationPolicy,
) -> Result<AlphaAllocation> {
    // alpha = 0 is accepted as a closed gate (every level 0)
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::OutOfRange(format!("alpha must be in [0, 1), got {alpha}")));
    }
    if constraints.is_empty() {
        return Err(Error::Input("no constraints".into()));
    }
    let mut largest = vec![0usize; n_nodes];
    for s in constraints {
        for &i in s {
            if i >= n_nodes {
                return Err(Error::Input(format!("constraint names node {i} outside 0..{n_nodes}")));
            }
            largest[i] = largest[i].max(s.len());
        }
    }
    if let Some(v) = largest.iter().position(|&k| k == 0) {
        return Err(Error::Input(format!("node {v} appears in no constraint")));
    }
    let levels = match policy {
        AllocationPolicy::KPlusOne => largest.iter().map(|&k| alpha / k as f64).collect(),
        AllocationPolicy::MaxMin => water_fill(constraints, n_nodes, alpha)?,
    };
    let alloc = AlphaAllocation { alpha, policy, levels, constraints: canonical(constraints.to_vec()) };
    if let Some(s) = alloc.constraints.iter().find(|s| alloc.constraint_sum(s) > alpha + 1e-12) {
        return Err(Error::Infeasible(format!(
            "constraint {s:?} sums to {} > alpha = {alpha}",
            alloc.constraint_sum(s)
        )));
    }
    Ok(alloc)
}

fn water_fill(constraints: &[Vec<NodeId>], n_nodes: usize, alpha: f64) -> Result<Vec<f64>> {
    let mut levels = vec![0.0; n_nodes];
    let mut frozen = vec![false; n_nodes];
    while frozen.iter().any(|f| !f) {
        // common level at which the next constraints become tight
        let mut tight: Vec<(f64, &Vec<NodeId>)> = Vec::new();
        for s in constraints {
            let free = s.iter().filter(|&&i| !frozen[i]).count();
            if free == 0 {
                continue;
            }
            let used: f64 = s.iter().filter(|&&i| frozen[i]).map(|&i| levels[i]).sum();
            let t = (alpha - used) / free as f64;
            if t < 0.0 {
                return Err(Error::Infeasible(format!("constraint {s:?} already exceeds alpha")));
            }
            tight.push((t, s));
        }
        let next = tight.iter().map(|&(t, _)| t).fold(f64::INFINITY, f64::min);
        if !next.is_finite() {
            return Err(Error::Infeasible("water-filling could not make progress".into()));
        }
        for (i, l) in levels.iter_mut().enumerate() {
            if !frozen[i] {
                *l = next;
            }
        }
        for (t, s) in tight {
            if t <= next * (1.0 + 1e-12) {
                for &i in s {
                    frozen[i] = true;
                }
            }
        }
    }
    Ok(levels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NodeStatus {
    Rejected,
    NotRejected,
    NotTested,
    /// Eligible for testing but the p-value could not be produced.
    Aborted,
}

impl NodeStatus {
    pub fn short(&self) -> &'static str {
        match self {
            NodeStatus::Rejected => "R",
            NodeStatus::NotRejected => "NR",
            NodeStatus::NotTested => "NT",
            NodeStatus::Aborted => "ABORT",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestDecision {
    pub status: Vec<NodeStatus>,
    pub pvalues: Vec<Option<f64>>,
    /// Nodes whose p-value provider failed, with the error message.
    pub errors: Vec<(NodeId, String)>,
}

impl TestDecision {
    pub fn rejected(&self) -> Vec<NodeId> {
        (0..self.status.len()).filter(|&v| self.status[v] == NodeStatus::Rejected).collect()
    }

    pub fn is_tested(&self, v: NodeId) -> bool {
        matches!(self.status[v], NodeStatus::Rejected | NodeStatus::NotRejected)
    }

    /// Tested nodes must have a rejected parent.
    pub fn is_ancestor_closed(&self, tree: &ExposureTree) -> bool {
        (0..tree.len()).all(|v| {
            !self.is_tested(v) || tree.node(v).parent.is_none_or(|p| self.status[p] == NodeStatus::Rejected)
        })
    }
}

/// Tests from the root down; children of a node are tested only if it is
/// rejected (`p < level`). A provider error marks that node `Aborted`, leaves
/// its descendants untested, and does not stop other branches.
pub fn run_ordered_testing<F, E>(tree: &ExposureTree, allocation: &AlphaAllocation, mut pvalue: F) -> TestDecision
where
    F: FnMut(&HypothesisNode, f64, f64) -> std::result::Result<f64, E>,
    E: fmt::Display,
{
    let n = tree.len();
    let mut status = vec![NodeStatus::NotTested; n];
    let mut pvalues = vec![None; n];
    let mut errors = Vec::new();
    let mut queue = VecDeque::from([tree.root()]);
    while let Some(v) = queue.pop_front() {
        let node = tree.node(v);
        let level = allocation.level(v);
        match pvalue(node, node.tau0, level) {
            Ok(p) if (0.0..=1.0).contains(&p) => {
                pvalues[v] = Some(p);
                if p < level {
                    status[v] = NodeStatus::Rejected;
                    queue.extend(node.children.iter().copied());
                } else {
                    status[v] = NodeStatus::NotRejected;
                }
            }
            Ok(p) => {
                status[v] = NodeStatus::Aborted;
                errors.push((v, format!("p-value {p} outside [0, 1]")));
            }
            Err(e) => {
                status[v] = NodeStatus::Aborted;
                errors.push((v, e.to_string()));
            }
        }
    }
    TestDecision { status, pvalues, errors }
}
