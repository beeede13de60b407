//! End-to-end study over an exposure tree: per-node propensity fit, trimming,
//! matching and balance with carryover from parent to child, followed by
//! ordered testing of each outcome.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::balance::{BalanceContext, BalanceTable};
use crate::cohort::{
    assign_exposures, encode_design_matrix, load_cohort, Cohort, CovariateSchema, CovariateSpec, DesignMatrix,
    ExposureMap, ExposureStatus, SportClassification,
};
use crate::distance::{apply_caliper, rank_transform, Caliper, RankMahalanobis};
use crate::fullmatch::{select_k, FullMatch, KCandidate, MAX_K};
use crate::hypotree::{
    allocate_alpha, derive_constraints, run_ordered_testing, AllocationPolicy, AlphaAllocation, ExposureTree, NodeId,
    NodeStatus,
};
use crate::inference::{m_test, test_node, MStatConfig, MatchedOutcomes, TestResult};
use crate::propensity::{fit_logistic, trim_extremes};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum OutcomeRole {
    #[default]
    CoPrimary,
    Secondary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutcomeSpec {
    pub name: String,
    #[serde(default)]
    pub role: OutcomeRole,
    /// Overrides every node's null effect when set.
    #[serde(default)]
    pub tau0: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ControlPool {
    /// Child nodes draw controls from the parent's matched controls.
    #[default]
    ParentMatched,
    /// Every node draws from the full no-activity pool, minus units trimmed
    /// at earlier nodes.
    AllControls,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MatchScope {
    /// Match every node.
    #[default]
    All,
    /// Match only nodes some co-primary outcome reaches in ordered testing.
    Tested,
}

/// Everything except the inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudySettings {
    pub alpha: f64,
    pub policy: AllocationPolicy,
    pub k_min: usize,
    pub k_max: usize,
    /// Stop scanning k once a match leaves no weakly imbalanced covariate.
    pub k_stop_early: bool,
    pub caliper: Caliper,
    pub mstat: MStatConfig,
    pub control_pool: ControlPool,
    pub scope: MatchScope,
    /// Compute confidence intervals and point estimates for tested nodes.
    pub intervals: bool,
    pub seed: u64,
    #[serde(rename = "outcome")]
    pub outcomes: Vec<OutcomeSpec>,
}

impl Default for StudySettings {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            policy: AllocationPolicy::KPlusOne,
            k_min: 1,
            k_max: MAX_K,
            k_stop_early: false,
            caliper: Caliper::default(),
            mstat: MStatConfig::default(),
            control_pool: ControlPool::ParentMatched,
            scope: MatchScope::All,
            intervals: true,
            seed: 0,
            outcomes: Vec::new(),
        }
    }
}

impl StudySettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must be in [0, 1), got {}", self.alpha)));
        }
        if self.k_min < 1 || self.k_max > MAX_K || self.k_min > self.k_max {
            return Err(Error::Config(format!("k range {}..={} must lie within 1..={MAX_K}", self.k_min, self.k_max)));
        }
        if !(self.caliper.width_sd >= 0.0 && self.caliper.penalty >= 0.0) {
            return Err(Error::Config("caliper width and penalty must be non-negative".into()));
        }
        self.mstat.validate()?;
        if self.outcomes.is_empty() {
            return Err(Error::Config("no outcomes configured".into()));
        }
        Ok(())
    }
}

/// Parsed study inputs.
#[derive(Debug, Clone)]
pub struct StudyInputs {
    pub cohort: Cohort,
    pub tree: ExposureTree,
    pub classification: SportClassification,
}

/// On-disk study configuration. Paths are relative to the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub cohort: PathBuf,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
    #[serde(default)]
    pub tree: Option<PathBuf>,
    #[serde(default)]
    pub classification: Option<PathBuf>,
    #[serde(rename = "covariate")]
    pub covariates: Vec<CovariateSpec>,
    #[serde(flatten)]
    pub settings: StudySettings,
}

fn default_delimiter() -> char {
    ','
}

impl StudyConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: StudyConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.settings.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<(Self, StudyInputs)> {
        let cfg = Self::from_toml(&fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let inputs = cfg.load_inputs(base)?;
        Ok((cfg, inputs))
    }

    pub fn load_inputs(&self, base: &Path) -> Result<StudyInputs> {
        if !self.delimiter.is_ascii() {
            return Err(Error::Config(format!("delimiter `{}` is not ASCII", self.delimiter)));
        }
        let schema = CovariateSchema::new(self.covariates.clone())?;
        let file = fs::File::open(base.join(&self.cohort))?;
        let cohort = load_cohort(file, &schema, self.delimiter as u8)?;
        let tree = match &self.tree {
            Some(p) => ExposureTree::from_toml(&fs::read_to_string(base.join(p))?)?,
            None => ExposureTree::paper_default(),
        };
        let classification = match &self.classification {
            Some(p) => SportClassification::from_toml(&fs::read_to_string(base.join(p))?)?,
            None => SportClassification::default(),
        };
        Ok(StudyInputs { cohort, tree, classification })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct NodeCounts {
    pub before_exposed: usize,
    pub before_control: usize,
    pub trimmed_exposed: usize,
    pub trimmed_control: usize,
    pub after_exposed: usize,
    pub after_control: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "kebab-case")]
pub enum NodeState {
    Matched,
    Failed { reason: String },
    /// Not needed by any test under the configured match scope.
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeReport {
    pub label: String,
    pub parent: Option<String>,
    pub state: NodeState,
    pub counts: NodeCounts,
    pub k: Option<usize>,
    pub matched_sets: usize,
    pub propensity_converged: Option<bool>,
    pub separation: Option<bool>,
    pub candidates: Vec<KCandidate>,
    pub balance: Option<BalanceTable>,
    /// The match itself; kept out of the serialized report.
    #[serde(skip)]
    pub matched: Option<FullMatch>,
}

impl NodeReport {
    fn new(label: String, parent: Option<String>) -> Self {
        Self {
            label,
            parent,
            state: NodeState::Skipped,
            counts: NodeCounts::default(),
            k: None,
            matched_sets: 0,
            propensity_converged: None,
            separation: None,
            candidates: Vec::new(),
            balance: None,
            matched: None,
        }
    }

    pub fn is_matched(&self) -> bool {
        self.state == NodeState::Matched
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeTest {
    pub status: NodeStatus,
    pub result: Option<TestResult>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeReport {
    pub name: String,
    pub role: OutcomeRole,
    pub nodes: Vec<NodeTest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub n_subjects: usize,
    pub seed: u64,
    pub allocation: AlphaAllocation,
    pub constraint_labels: Vec<Vec<String>>,
    pub nodes: Vec<NodeReport>,
    pub outcomes: Vec<OutcomeReport>,
}

struct Runner<'a> {
    inputs: &'a StudyInputs,
    settings: &'a StudySettings,
    design: DesignMatrix,
    /// Reference-coded design for the propensity model.
    regress_columns: Vec<usize>,
    exposures: ExposureMap,
    nodes: Vec<Option<NodeReport>>,
    trimmed_controls: Vec<bool>,
}

impl<'a> Runner<'a> {
    fn node(&mut self, v: NodeId) -> &NodeReport {
        if self.nodes[v].is_none() {
            let report = self.process(v);
            self.nodes[v] = Some(report);
        }
        self.nodes[v].as_ref().expect("node processed above")
    }

    fn pools(&mut self, v: NodeId) -> std::result::Result<(Vec<usize>, Vec<usize>), String> {
        let inputs = self.inputs;
        let tree = &inputs.tree;
        match tree.node(v).parent {
            None => {
                let controls = self.exposures.controls();
                Ok((self.exposures.exposed_at(v), controls))
            }
            Some(p) => {
                let parent = self.node(p);
                let (parent_exposed, parent_controls) = match &parent.matched {
                    Some(m) if parent.is_matched() => (m.exposed_units(), m.control_units()),
                    _ => return Err(format!("parent `{}` has no usable match", parent.label)),
                };
                let exposed: Vec<usize> = parent_exposed
                    .into_iter()
                    .filter(|&u| self.exposures.get(u, v) == ExposureStatus::Exposed)
                    .collect();
                let controls = match self.settings.control_pool {
                    ControlPool::ParentMatched => parent_controls,
                    ControlPool::AllControls => {
                        self.exposures.controls().into_iter().filter(|&u| !self.trimmed_controls[u]).collect()
                    }
                };
                Ok((exposed, controls))
            }
        }
    }

    fn process(&mut self, v: NodeId) -> NodeReport {
        let inputs = self.inputs;
        let tree = &inputs.tree;
        let node = tree.node(v);
        let mut report = NodeReport::new(node.label.clone(), node.parent.map(|p| tree.node(p).label.clone()));
        let (exposed, controls) = match self.pools(v) {
            Ok(p) => p,
            Err(reason) => {
                report.state = NodeState::Failed { reason };
                return report;
            }
        };
        report.counts.before_exposed = exposed.len();
        report.counts.before_control = controls.len();
        if let Err(e) = self.match_node(&exposed, &controls, &mut report) {
            report.state = NodeState::Failed { reason: e.to_string() };
        }
        report
    }

    fn match_node(&mut self, exposed: &[usize], controls: &[usize], report: &mut NodeReport) -> Result<()> {
        if exposed.len() < 2 || controls.len() < 2 {
            return Err(Error::Infeasible(format!(
                "pool has {} exposed and {} controls",
                exposed.len(),
                controls.len()
            )));
        }
        let units: Vec<usize> = exposed.iter().chain(controls).copied().collect();
        let is_exposed: Vec<bool> = (0..units.len()).map(|i| i < exposed.len()).collect();
        let x = self.design.data.select_rows(&units).select_columns(&self.regress_columns);
        let model = fit_logistic(&x, &is_exposed)?;
        report.propensity_converged = Some(model.converged);
        report.separation = Some(model.separation);

        let trim = trim_extremes(&units, &model.scores, &is_exposed);
        report.counts.trimmed_exposed = trim.dropped_exposed.len();
        report.counts.trimmed_control = trim.dropped_control.len();
        for &u in &trim.dropped_control {
            self.trimmed_controls[u] = true;
        }
        let dropped = |u: &usize| trim.dropped_exposed.contains(u) || trim.dropped_control.contains(u);
        // positions into `units` of the retained exposed and controls
        let e_pos: Vec<usize> = (0..exposed.len()).filter(|&i| !dropped(&units[i])).collect();
        let c_pos: Vec<usize> = (exposed.len()..units.len()).filter(|&i| !dropped(&units[i])).collect();
        if e_pos.len() < 2 || c_pos.len() < 2 {
            return Err(Error::Infeasible(format!(
                "no overlap: {} exposed and {} controls left after trimming",
                e_pos.len(),
                c_pos.len()
            )));
        }

        let kept: Vec<usize> = e_pos.iter().chain(&c_pos).copied().collect();
        let kept_units: Vec<usize> = kept.iter().map(|&i| units[i]).collect();
        let covariates: DMatrix<f64> = self.design.data.select_rows(&kept_units);
        let metric = RankMahalanobis::fit(&rank_transform(&covariates))?;
        let ne = e_pos.len();
        let rows: Vec<usize> = (0..ne).collect();
        let cols: Vec<usize> = (ne..kept.len()).collect();
        let d = metric.matrix(&rows, &cols, &kept_units)?;
        let score = |i: usize| model.scores[kept[i]];
        let d = apply_caliper(
            &d,
            &rows.iter().map(|&i| score(i)).collect::<Vec<_>>(),
            &cols.iter().map(|&i| score(i)).collect::<Vec<_>>(),
            &self.settings.caliper,
        )?;

        let ctx = BalanceContext::new(&self.design.data, &self.design.labels, &d.rows, &d.cols)?;
        let (m, diag) = select_k(&d, self.settings.k_min..=self.settings.k_max, self.settings.k_stop_early, |m| ctx.evaluate(m))?;
        report.counts.after_exposed = m.n_exposed();
        report.counts.after_control = m.n_controls();
        report.k = Some(m.k);
        report.matched_sets = m.sets.len();
        report.candidates = diag.candidates;
        report.balance = Some(diag.balance);
        report.matched = Some(m);
        report.state = if diag.failed {
            NodeState::Failed { reason: format!("post-match max ASD {:.4} at or above 0.2", diag.max_asd) }
        } else {
            NodeState::Matched
        };
        Ok(())
    }

    fn outcome_data(&mut self, v: NodeId, outcome: &str) -> Result<MatchedOutcomes> {
        let inputs = self.inputs;
        let cohort = &inputs.cohort;
        let node = self.node(v);
        let m = match (&node.state, &node.matched) {
            (NodeState::Matched, Some(m)) => m,
            (NodeState::Failed { reason }, _) => return Err(Error::Infeasible(reason.clone())),
            _ => return Err(Error::Infeasible(format!("node `{}` was not matched", node.label))),
        };
        MatchedOutcomes::new(
            m,
            outcome,
            |u| cohort.subjects[u].outcomes.get(outcome).copied(),
            |u| cohort.subjects[u].id.clone(),
        )
    }
}

/// Runs the whole protocol on parsed inputs.
pub fn run_study(inputs: &StudyInputs, settings: &StudySettings) -> Result<StudyReport> {
    settings.validate()?;
    let tree = &inputs.tree;
    let cohort = &inputs.cohort;
    if cohort.is_empty() {
        return Err(Error::Input("empty cohort".into()));
    }
    let names = cohort.outcome_names();
    for o in &settings.outcomes {
        if !names.contains(&o.name) {
            return Err(Error::Config(format!("outcome `{}` not present in the cohort", o.name)));
        }
    }
    let exposures = assign_exposures(cohort, tree, &inputs.classification)?;
    let design = encode_design_matrix(cohort)?;
    let regress_columns = design.reference_coded_columns();
    let constraints = derive_constraints(tree)?;
    let allocation = allocate_alpha(&constraints, tree.len(), settings.alpha, settings.policy)?;
    let mut runner = Runner {
        inputs,
        settings,
        design,
        regress_columns,
        exposures,
        nodes: vec![None; tree.len()],
        trimmed_controls: vec![false; cohort.len()],
    };
    let order = tree.breadth_first();
    if settings.scope == MatchScope::All {
        for &v in &order {
            runner.node(v);
        }
    }

    let mut outcomes = Vec::new();
    for spec in &settings.outcomes {
        let mut node_tree = tree.clone();
        if let Some(t) = spec.tau0 {
            node_tree.set_tau0(t);
        }
        let nodes = match spec.role {
            OutcomeRole::CoPrimary => {
                let decision = run_ordered_testing(&node_tree, &allocation, |node, tau0, _level| {
                    let data = runner.outcome_data(node.id, &spec.name)?;
                    m_test(&data, tau0, &settings.mstat).map(|t| t.pvalue)
                });
                let mut nodes = Vec::with_capacity(tree.len());
                for v in 0..tree.len() {
                    let status = decision.status[v];
                    let error = decision.errors.iter().find(|(u, _)| *u == v).map(|(_, e)| e.clone());
                    let result = if decision.pvalues[v].is_some() {
                        Some(node_result(&mut runner, &node_tree, v, &spec.name, allocation.level(v))?)
                    } else {
                        None
                    };
                    nodes.push(NodeTest { status, result, error });
                }
                nodes
            }
            OutcomeRole::Secondary => {
                let mut nodes = Vec::with_capacity(tree.len());
                for v in 0..tree.len() {
                    let matched = runner.nodes[v].as_ref().is_some_and(|n| n.is_matched());
                    if !matched {
                        nodes.push(NodeTest { status: NodeStatus::NotTested, result: None, error: None });
                        continue;
                    }
                    match node_result(&mut runner, &node_tree, v, &spec.name, allocation.level(v)) {
                        Ok(r) => {
                            let status =
                                if r.pvalue < allocation.level(v) { NodeStatus::Rejected } else { NodeStatus::NotRejected };
                            nodes.push(NodeTest { status, result: Some(r), error: None });
                        }
                        Err(e) => {
                            nodes.push(NodeTest { status: NodeStatus::Aborted, result: None, error: Some(e.to_string()) })
                        }
                    }
                }
                nodes
            }
        };
        outcomes.push(OutcomeReport { name: spec.name.clone(), role: spec.role, nodes });
    }

    let nodes = runner
        .nodes
        .into_iter()
        .enumerate()
        .map(|(v, n)| {
            n.unwrap_or_else(|| {
                let node = tree.node(v);
                NodeReport::new(node.label.clone(), node.parent.map(|p| tree.node(p).label.clone()))
            })
        })
        .collect();
    let constraint_labels =
        allocation.constraints.iter().map(|s| s.iter().map(|&v| tree.node(v).label.clone()).collect()).collect();
    Ok(StudyReport { n_subjects: cohort.len(), seed: settings.seed, allocation, constraint_labels, nodes, outcomes })
}

fn node_result(runner: &mut Runner<'_>, tree: &ExposureTree, v: NodeId, outcome: &str, level: f64) -> Result<TestResult> {
    let data = runner.outcome_data(v, outcome)?;
    let node = tree.node(v);
    let level = if runner.settings.intervals { level } else { 0.0 };
    test_node(&node.label, &data, node.tau0, level, &runner.settings.mstat)
}
