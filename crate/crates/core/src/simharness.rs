//! Synthetic confounded cohorts with known effects, and Monte Carlo checks
//! of error-rate control, interval coverage and balance.
//!
//! Every subject has a latent participation index built from its covariates.
//! The same index drives joining any activity, choosing sports over other
//! activities, contact over non-contact sports and collision over other
//! contact sports, and (scaled separately) the outcome baseline. Outcomes add
//! the true effect of every tree node at which the subject is exposed.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::{
    assign_exposures, Cohort, CovariateSchema, CovariateSpec, CovariateValue, ExposureStatus, SportClassification,
    Subject,
};
use crate::hypotree::{ExposureTree, NodeId, NodeStatus};
use crate::pipeline::{run_study, MatchScope, OutcomeRole, OutcomeSpec, StudyInputs, StudyReport, StudySettings};
use crate::{Error, Result};

pub const OUTCOME: &str = "y";

const COLLISION: [&str; 3] = ["Football", "Hockey", "Lacrosse"];
const CONTACT: [&str; 3] = ["Basketball", "Soccer", "Baseball"];
const NON_CONTACT: [&str; 3] = ["Tennis", "Track", "Swimming"];
const NON_SPORT: [&str; 3] = ["Band", "Choir", "Theater"];

/// Log-odds intercepts of the participation steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Participation {
    pub activity: f64,
    pub sports: f64,
    pub contact: f64,
    pub collision: f64,
    /// Chance that a sports participant also has a non-sport activity.
    pub extra_non_sport: f64,
}

impl Default for Participation {
    fn default() -> Self {
        Self { activity: 0.0, sports: 0.4, contact: 0.2, collision: 0.0, extra_non_sport: 0.3 }
    }
}

/// Weights of the standardized covariates in the participation index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndexWeights {
    pub age: f64,
    pub score: f64,
    pub female: f64,
    pub income: f64,
    pub education: f64,
    pub race: f64,
}

impl Default for IndexWeights {
    fn default() -> Self {
        Self { age: 0.4, score: 0.6, female: -0.3, income: 0.4, education: 0.3, race: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticDgp {
    pub n: usize,
    /// Multiplies the index in every participation logit.
    pub confounding: f64,
    /// Multiplies the index in the outcome baseline.
    pub outcome_confounding: f64,
    pub noise_sd: f64,
    pub weights: IndexWeights,
    pub participation: Participation,
    /// True additive effect per node label; absent nodes have none.
    pub effects: BTreeMap<String, f64>,
    pub seed: u64,
}

impl Default for SyntheticDgp {
    fn default() -> Self {
        Self {
            n: 600,
            confounding: 0.5,
            outcome_confounding: 1.0,
            noise_sd: 1.0,
            weights: IndexWeights::default(),
            participation: Participation::default(),
            effects: BTreeMap::new(),
            seed: 1,
        }
    }
}

impl SyntheticDgp {
    pub fn from_toml(s: &str) -> Result<Self> {
        let dgp: SyntheticDgp = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        dgp.validate()?;
        Ok(dgp)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 4 {
            return Err(Error::Config(format!("cohort size {} is too small", self.n)));
        }
        if self.noise_sd.is_nan() || self.noise_sd < 0.0 || !self.confounding.is_finite() || !self.outcome_confounding.is_finite() {
            return Err(Error::Config("noise must be non-negative and strengths finite".into()));
        }
        if !(0.0..=1.0).contains(&self.participation.extra_non_sport) {
            return Err(Error::Config("extra_non_sport must be a probability".into()));
        }
        if self.effects.values().any(|v| !v.is_finite()) {
            return Err(Error::Config("effects must be finite".into()));
        }
        Ok(())
    }

    pub fn schema() -> CovariateSchema {
        CovariateSchema {
            entries: vec![
                CovariateSpec::continuous("age"),
                CovariateSpec::continuous("score"),
                CovariateSpec::categorical("sex", &["Male", "Female"]),
                CovariateSpec::categorical("race", &["White", "Black", "Other"]),
                CovariateSpec::categorical("income", &["Q1", "Q2", "Q3", "Q4", "Q5"]),
                CovariateSpec::categorical("parent_education", &["HS", "College", "Graduate"]),
            ],
        }
    }

    /// Classification covering the activities the generator emits.
    pub fn classification() -> SportClassification {
        let set = |names: &[&str]| names.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>();
        SportClassification {
            collision: set(&COLLISION),
            contact: set(&CONTACT),
            non_contact: set(&NON_CONTACT),
            non_sport: set(&NON_SPORT),
        }
    }

    /// The null of no effect at `v` holds when `v`, its ancestors and its
    /// descendants all have zero effect.
    pub fn is_null_true(&self, tree: &ExposureTree, v: NodeId) -> bool {
        tree.ancestors(v)
            .into_iter()
            .chain(std::iter::once(v))
            .chain(tree.descendants(v))
            .all(|u| self.effect(tree, u) == 0.0)
    }

    fn effect(&self, tree: &ExposureTree, v: NodeId) -> f64 {
        self.effects.get(&tree.node(v).label).copied().unwrap_or(0.0)
    }

    /// The common effect of every unit exposed at `v`, if there is one.
    pub fn node_effect(&self, tree: &ExposureTree, v: NodeId) -> Option<f64> {
        if tree.descendants(v).iter().any(|&u| self.effect(tree, u) != 0.0) {
            return None;
        }
        Some(tree.ancestors(v).into_iter().chain(std::iter::once(v)).map(|u| self.effect(tree, u)).sum())
    }
}

fn pick<'a, R: Rng>(rng: &mut R, items: &[&'a str], probs: &[f64]) -> &'a str {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (item, p) in items.iter().zip(probs) {
        acc += p;
        if u < acc {
            return item;
        }
    }
    items[items.len() - 1]
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Draws a cohort using `rng`. Effects are attached by tree node label, so
/// `tree` must be the tree the study will use.
pub fn generate_cohort_with<R: Rng>(dgp: &SyntheticDgp, tree: &ExposureTree, rng: &mut R) -> Result<Cohort> {
    dgp.validate()?;
    let cls = SyntheticDgp::classification();
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let w = dgp.weights;
    let p = dgp.participation;
    let mut subjects = Vec::with_capacity(dgp.n);
    for i in 0..dgp.n {
        let age_z: f64 = std_normal.sample(rng);
        let score: f64 = std_normal.sample(rng);
        let female = rng.random_bool(0.5);
        let race = pick(rng, &["White", "Black", "Other"], &[0.6, 0.2, 0.2]);
        let q = rng.random_range(1..=5u8);
        let edu = pick(rng, &["HS", "College", "Graduate"], &[0.4, 0.4, 0.2]);

        let index = w.age * age_z
            + w.score * score
            + w.female * if female { 1.0 } else { -1.0 }
            + w.income * (f64::from(q) - 3.0) / 2f64.sqrt()
            + w.education * match edu {
                "HS" => -1.0,
                "College" => 0.5,
                _ => 1.0,
            }
            + w.race * if race == "White" { 1.0 } else { -1.0 };
        let lin = dgp.confounding * index;

        let mut activities = BTreeSet::new();
        if rng.random_bool(sigmoid(p.activity + lin)) {
            if rng.random_bool(sigmoid(p.sports + lin)) {
                let class = if rng.random_bool(sigmoid(p.contact + lin)) {
                    if rng.random_bool(sigmoid(p.collision + lin)) {
                        &COLLISION
                    } else {
                        &CONTACT
                    }
                } else {
                    &NON_CONTACT
                };
                activities.insert(class[rng.random_range(0..class.len())].to_string());
                if rng.random_bool(p.extra_non_sport) {
                    activities.insert(NON_SPORT[rng.random_range(0..NON_SPORT.len())].to_string());
                }
            } else {
                activities.insert(NON_SPORT[rng.random_range(0..NON_SPORT.len())].to_string());
            }
        }
        let noise: f64 = std_normal.sample(rng) * dgp.noise_sd;
        let baseline = dgp.outcome_confounding * index + noise;
        subjects.push(Subject {
            id: format!("s{:05}", i + 1),
            covariates: vec![
                CovariateValue::Number(((15.5 + 1.4 * age_z) * 100.0).round() / 100.0),
                CovariateValue::Number(score),
                CovariateValue::Level(if female { "Female" } else { "Male" }.to_string()),
                CovariateValue::Level(race.to_string()),
                CovariateValue::Level(format!("Q{q}")),
                CovariateValue::Level(edu.to_string()),
            ],
            activities,
            outcomes: BTreeMap::from([(OUTCOME.to_string(), baseline)]),
        });
    }
    let mut cohort = Cohort::new(SyntheticDgp::schema(), subjects)?;

    let exposures = assign_exposures(&cohort, tree, &cls)?;
    for (i, s) in cohort.subjects.iter_mut().enumerate() {
        let effect: f64 = (0..tree.len())
            .filter(|&v| exposures.get(i, v) == ExposureStatus::Exposed)
            .map(|v| dgp.effect(tree, v))
            .sum();
        *s.outcomes.get_mut(OUTCOME).expect("outcome set above") += effect;
    }
    Ok(cohort)
}

/// Draws the cohort for `dgp.seed`.
pub fn generate_cohort(dgp: &SyntheticDgp, tree: &ExposureTree) -> Result<Cohort> {
    generate_cohort_with(dgp, tree, &mut ChaCha8Rng::seed_from_u64(dgp.seed))
}

/// Generator for replication `rep`: one ChaCha stream per replication under
/// the master seed, so replications do not depend on execution order.
pub fn replication_rng(seed: u64, rep: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep);
    rng
}

/// A simulation file: the generator, the study settings applied to every
/// replication, and optional defaults for the replication count and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSpec {
    #[serde(default)]
    pub dgp: SyntheticDgp,
    #[serde(default = "default_study")]
    pub study: StudySettings,
    #[serde(default = "default_reps")]
    pub reps: usize,
    #[serde(default)]
    pub seed: u64,
    /// Tree file relative to the simulation file; the default tree otherwise.
    #[serde(default)]
    pub tree: Option<std::path::PathBuf>,
}

fn default_reps() -> usize {
    200
}

/// Settings for scoring the generated outcome: ordered testing over the
/// tree, matching only the nodes that testing reaches.
pub fn default_study() -> StudySettings {
    StudySettings {
        scope: MatchScope::Tested,
        k_stop_early: true,
        outcomes: vec![OutcomeSpec { name: OUTCOME.to_string(), role: OutcomeRole::CoPrimary, tau0: None }],
        ..Default::default()
    }
}

impl SimulationSpec {
    pub fn from_toml(s: &str) -> Result<Self> {
        let spec: SimulationSpec = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        spec.dgp.validate()?;
        spec.study.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct NodeSummary {
    pub label: String,
    pub null_true: bool,
    pub tested: usize,
    pub rejected: usize,
    pub rejection_rate: f64,
    pub effect: Option<f64>,
    /// Replications where the node was tested and the interval covered the
    /// node's effect.
    pub covered: usize,
    pub coverage: Option<f64>,
    pub matched: usize,
    pub mean_max_asd_before: Option<f64>,
    pub mean_max_asd_after: Option<f64>,
    /// Matched replications with post-match max ASD below 0.2.
    pub balanced: usize,
    /// Matched replications where more covariates sat in (0.1, 0.2) after
    /// matching than before.
    pub weak_increased: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloSummary {
    pub replications: usize,
    pub completed: usize,
    pub errors: usize,
    pub first_error: Option<String>,
    /// Replications rejecting at least one true null.
    pub familywise_errors: usize,
    pub fwer: f64,
    pub fwer_se: f64,
    pub nodes: Vec<NodeSummary>,
}

impl MonteCarloSummary {
    pub fn node(&self, label: &str) -> Option<&NodeSummary> {
        self.nodes.iter().find(|n| n.label == label)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "replications: {}\ncompleted: {}\nerrors: {}\nfwer: {:.4} (se {:.4}, {} of {})\n",
            self.replications, self.completed, self.errors, self.fwer, self.fwer_se, self.familywise_errors, self.completed
        );
        if let Some(e) = &self.first_error {
            out.push_str(&format!("first error: {e}\n"));
        }
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
        out.push_str("node\tnull\ttested\trejection_rate\tcoverage\tmatched\tmax_asd_before\tmax_asd_after\tbalanced\tweak_increased\n");
        for n in &self.nodes {
            out.push_str(&format!(
                "{}\t{}\t{}\t{:.4}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                n.label,
                n.null_true,
                n.tested,
                n.rejection_rate,
                fmt(n.coverage),
                n.matched,
                fmt(n.mean_max_asd_before),
                fmt(n.mean_max_asd_after),
                n.balanced,
                n.weak_increased
            ));
        }
        out
    }
}

/// Per-replication facts kept for aggregation.
#[derive(Debug, Clone)]
struct RepFacts {
    tested: Vec<bool>,
    rejected: Vec<bool>,
    covered: Vec<bool>,
    balance: Vec<Option<(f64, f64, bool)>>,
}

fn facts(report: &StudyReport, dgp: &SyntheticDgp, tree: &ExposureTree) -> RepFacts {
    let n = tree.len();
    let outcome = report.outcomes.first();
    let mut f = RepFacts { tested: vec![false; n], rejected: vec![false; n], covered: vec![false; n], balance: vec![None; n] };
    for v in 0..n {
        if let Some(t) = outcome.map(|o| &o.nodes[v]) {
            f.tested[v] = t.result.is_some();
            f.rejected[v] = t.status == NodeStatus::Rejected;
            if let (Some(r), Some(effect)) = (&t.result, dgp.node_effect(tree, v)) {
                f.covered[v] = r.lower <= effect && effect <= r.upper;
            }
        }
        if let Some(b) = &report.nodes[v].balance {
            f.balance[v] = Some((b.max_asd_before(), b.max_asd_after(), b.n_weak_after() > b.n_weak_before()));
        }
    }
    f
}

/// Runs `reps` replications of generate-then-study and aggregates. The first
/// configured outcome is the one scored; it must be the generated outcome.
pub fn monte_carlo(
    dgp: &SyntheticDgp,
    tree: &ExposureTree,
    settings: &StudySettings,
    reps: usize,
    seed: u64,
) -> Result<MonteCarloSummary> {
    if reps == 0 {
        return Err(Error::Config("at least one replication is required".into()));
    }
    dgp.validate()?;
    settings.validate()?;
    if settings.outcomes.first().map(|o| o.name.as_str()) != Some(OUTCOME) {
        return Err(Error::Config(format!("the first outcome must be `{OUTCOME}`")));
    }
    let cls = SyntheticDgp::classification();
    let runs: Vec<std::result::Result<RepFacts, String>> = (0..reps as u64)
        .into_par_iter()
        .map(|rep| {
            let mut rng = replication_rng(seed, rep);
            let cohort = generate_cohort_with(dgp, tree, &mut rng).map_err(|e| e.to_string())?;
            let inputs = StudyInputs { cohort, tree: tree.clone(), classification: cls.clone() };
            let report = run_study(&inputs, settings).map_err(|e| format!("replication {rep}: {e}"))?;
            Ok(facts(&report, dgp, tree))
        })
        .collect();

    let n = tree.len();
    let mut nodes: Vec<NodeSummary> = (0..n)
        .map(|v| NodeSummary {
            label: tree.node(v).label.clone(),
            null_true: dgp.is_null_true(tree, v),
            effect: dgp.node_effect(tree, v),
            ..Default::default()
        })
        .collect();
    let mut completed = 0;
    let mut errors = 0;
    let mut first_error = None;
    let mut familywise_errors = 0;
    let mut asd_sums = vec![(0.0, 0.0); n];
    for run in runs {
        let f = match run {
            Ok(f) => f,
            Err(e) => {
                errors += 1;
                first_error.get_or_insert(e);
                continue;
            }
        };
        completed += 1;
        if (0..n).any(|v| f.rejected[v] && nodes[v].null_true) {
            familywise_errors += 1;
        }
        for (v, s) in nodes.iter_mut().enumerate() {
            s.tested += usize::from(f.tested[v]);
            s.rejected += usize::from(f.rejected[v]);
            s.covered += usize::from(f.covered[v]);
            if let Some((before, after, weak_up)) = f.balance[v] {
                s.matched += 1;
                asd_sums[v].0 += before;
                asd_sums[v].1 += after;
                s.balanced += usize::from(after < crate::balance::SEVERE);
                s.weak_increased += usize::from(weak_up);
            }
        }
    }
    for (v, s) in nodes.iter_mut().enumerate() {
        s.rejection_rate = if completed > 0 { s.rejected as f64 / completed as f64 } else { 0.0 };
        if s.effect.is_some() && s.tested > 0 {
            s.coverage = Some(s.covered as f64 / s.tested as f64);
        }
        if s.matched > 0 {
            s.mean_max_asd_before = Some(asd_sums[v].0 / s.matched as f64);
            s.mean_max_asd_after = Some(asd_sums[v].1 / s.matched as f64);
        }
    }
    let fwer = if completed > 0 { familywise_errors as f64 / completed as f64 } else { 0.0 };
    let fwer_se = if completed > 0 { (fwer * (1.0 - fwer) / completed as f64).sqrt() } else { 0.0 };
    Ok(MonteCarloSummary { replications: reps, completed, errors, first_error, familywise_errors, fwer, fwer_se, nodes })
}
