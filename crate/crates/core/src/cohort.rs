//! Subject ingestion, covariate/outcome construction and exposure assignment.
//!
//! A [`Cohort`] is a list of [`Subject`]s whose covariates are aligned with a
//! [`CovariateSchema`]. Exposure status at each node of an
//! [`ExposureTree`](crate::hypotree::ExposureTree) is derived from the
//! subject's activity set through a [`SportClassification`] and the node's
//! [`Membership`] predicate.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::{Read, Write};
use std::ops::Range;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypotree::ExposureTree;

pub const ID_COLUMN: &str = "id";
pub const ACTIVITIES_COLUMN: &str = "activities";
pub const MISSING_LEVEL: &str = "Missing";

const DEFAULT_CLASSIFICATION: &str = include_str!("../data/sports_classification.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MissingPolicy {
    /// Unknown categorical tokens are recoded to the Missing level.
    #[default]
    Lenient,
    /// Unknown categorical tokens are an error; blanks are still Missing.
    Strict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CovariateKind {
    Continuous,
    Categorical { levels: Vec<String> },
    /// Recorded household income (interval midpoints) coded into quintiles
    /// `Q1`..`Q5` of the cohort's empirical distribution.
    IncomeQuintile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: CovariateKind,
    #[serde(default)]
    pub missing_policy: MissingPolicy,
}

impl CovariateSpec {
    pub fn continuous(name: &str) -> Self {
        Self { name: name.to_string(), kind: CovariateKind::Continuous, missing_policy: MissingPolicy::Lenient }
    }

    pub fn categorical(name: &str, levels: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            kind: CovariateKind::Categorical { levels: levels.iter().map(|s| s.to_string()).collect() },
            missing_policy: MissingPolicy::Lenient,
        }
    }

    pub fn income_quintile(name: &str) -> Self {
        Self { name: name.to_string(), kind: CovariateKind::IncomeQuintile, missing_policy: MissingPolicy::Lenient }
    }

    pub fn strict(mut self) -> Self {
        self.missing_policy = MissingPolicy::Strict;
        self
    }

    /// Levels of a categorical (or quintile) covariate, `None` for continuous.
    pub fn levels(&self) -> Option<Vec<String>> {
        match &self.kind {
            CovariateKind::Continuous => None,
            CovariateKind::Categorical { levels } => Some(levels.clone()),
            CovariateKind::IncomeQuintile => Some((1..=5).map(|q| format!("Q{q}")).collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateSchema {
    pub entries: Vec<CovariateSpec>,
}

impl CovariateSchema {
    pub fn new(entries: Vec<CovariateSpec>) -> Result<Self> {
        let schema = Self { entries };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if e.name == ID_COLUMN || e.name == ACTIVITIES_COLUMN {
                return Err(Error::Schema(format!("covariate name `{}` is reserved", e.name)));
            }
            if !seen.insert(e.name.as_str()) {
                return Err(Error::Schema(format!("duplicate covariate `{}`", e.name)));
            }
            if let CovariateKind::Categorical { levels } = &e.kind {
                if levels.len() < 2 {
                    return Err(Error::Schema(format!("categorical `{}` needs at least 2 levels", e.name)));
                }
                let distinct: HashSet<_> = levels.iter().collect();
                if distinct.len() != levels.len() {
                    return Err(Error::Schema(format!("categorical `{}` repeats a level", e.name)));
                }
                if levels.iter().any(|l| l == MISSING_LEVEL) {
                    return Err(Error::Schema(format!("`{MISSING_LEVEL}` is implicit for `{}`", e.name)));
                }
            }
        }
        Ok(())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovariateValue {
    Number(f64),
    Level(String),
    Missing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub id: String,
    /// Aligned with the cohort schema's entry order.
    pub covariates: Vec<CovariateValue>,
    pub activities: BTreeSet<String>,
    pub outcomes: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cohort {
    pub schema: CovariateSchema,
    pub subjects: Vec<Subject>,
}

impl Cohort {
    pub fn new(schema: CovariateSchema, subjects: Vec<Subject>) -> Result<Self> {
        schema.validate()?;
        let mut ids = HashSet::new();
        for s in &subjects {
            if !ids.insert(s.id.as_str()) {
                return Err(Error::DuplicateId(s.id.clone()));
            }
            if s.covariates.len() != schema.entries.len() {
                return Err(Error::Schema(format!(
                    "subject `{}` has {} covariates, schema has {}",
                    s.id,
                    s.covariates.len(),
                    schema.entries.len()
                )));
            }
        }
        Ok(Self { schema, subjects })
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn covariate(&self, subject: usize, name: &str) -> Option<&CovariateValue> {
        let i = self.schema.index_of(name)?;
        self.subjects.get(subject).map(|s| &s.covariates[i])
    }

    pub fn outcome_names(&self) -> BTreeSet<String> {
        self.subjects.iter().flat_map(|s| s.outcomes.keys().cloned()).collect()
    }

    /// Canonical serialized form, stable across runs.
    pub fn to_canonical_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_canonical_json(s: &str) -> Result<Self> {
        let c: Cohort = serde_json::from_str(s)?;
        Cohort::new(c.schema, c.subjects)
    }

    /// Adds outcome `name` to every subject by applying `rule` to its raw
    /// outcome columns. Subjects whose raw inputs are incomplete get no value.
    pub fn derive_outcome(&mut self, name: &str, rule: &OutcomeRule) -> Result<()> {
        for s in &mut self.subjects {
            let value = match rule {
                OutcomeRule::DichotomizedHealth { source } => match s.outcomes.get(source) {
                    Some(&r) => Some(f64::from(dichotomize_health(as_integer(r, source)?)?)),
                    None => None,
                },
                OutcomeRule::Phq9Total { items } => {
                    let raw: Vec<Option<i64>> = items
                        .iter()
                        .map(|c| s.outcomes.get(c).map(|&v| as_integer(v, c)).transpose())
                        .collect::<Result<_>>()?;
                    if raw.iter().any(Option::is_none) {
                        None
                    } else {
                        Some(f64::from(phq9_total(&raw)?))
                    }
                }
            };
            match value {
                Some(v) => {
                    s.outcomes.insert(name.to_string(), v);
                }
                None => {
                    s.outcomes.remove(name);
                }
            }
        }
        Ok(())
    }
}

fn as_integer(v: f64, column: &str) -> Result<i64> {
    if v.fract() != 0.0 || !v.is_finite() {
        return Err(Error::OutOfRange(format!("`{column}` expects an integer, got {v}")));
    }
    Ok(v as i64)
}

/// Derived outcome constructions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "kebab-case")]
pub enum OutcomeRule {
    DichotomizedHealth { source: String },
    Phq9Total { items: Vec<String> },
}

fn is_missing_token(tok: &str) -> bool {
    tok.is_empty() || tok.eq_ignore_ascii_case("na") || tok.eq_ignore_ascii_case(MISSING_LEVEL)
}

/// Reads a delimited table with columns `id`, `activities`, one column per
/// schema covariate and any number of numeric outcome columns.
pub fn load_cohort<R: Read>(reader: R, schema: &CovariateSchema, delimiter: u8) -> Result<Cohort> {
    schema.validate()?;
    let mut rdr = csv::ReaderBuilder::new().delimiter(delimiter).trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let find = |name: &str| header.iter().position(|h| h == name);
    let id_col = find(ID_COLUMN).ok_or_else(|| Error::Parse { row: 1, message: "missing `id` column".into() })?;
    let act_col = find(ACTIVITIES_COLUMN)
        .ok_or_else(|| Error::Parse { row: 1, message: "missing `activities` column".into() })?;
    let mut cov_cols = Vec::with_capacity(schema.entries.len());
    for e in &schema.entries {
        let c = find(&e.name)
            .ok_or_else(|| Error::Parse { row: 1, message: format!("missing covariate column `{}`", e.name) })?;
        cov_cols.push(c);
    }
    let used: HashSet<usize> = cov_cols.iter().copied().chain([id_col, act_col]).collect();
    let outcome_cols: Vec<(usize, String)> =
        header.iter().enumerate().filter(|(i, _)| !used.contains(i)).map(|(i, h)| (i, h.clone())).collect();

    let mut subjects = Vec::new();
    let mut ids = HashSet::new();
    let mut raw_income: Vec<Vec<Option<f64>>> = vec![Vec::new(); schema.entries.len()];
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let row = e.position().map(|p| p.line() as usize).unwrap_or(0);
            Error::Parse { row, message: e.to_string() }
        })?;
        let row = rec.position().map(|p| p.line() as usize).unwrap_or(subjects.len() + 2);
        let field = |i: usize| rec.get(i).unwrap_or("");
        let id = field(id_col).to_string();
        if id.is_empty() {
            return Err(Error::Parse { row, message: "empty id".into() });
        }
        if !ids.insert(id.clone()) {
            return Err(Error::DuplicateId(id));
        }
        let activities: BTreeSet<String> =
            field(act_col).split(';').map(str::trim).filter(|a| !a.is_empty()).map(str::to_string).collect();

        let mut covariates = Vec::with_capacity(schema.entries.len());
        for (k, (e, &c)) in schema.entries.iter().zip(&cov_cols).enumerate() {
            let tok = field(c);
            let value = match &e.kind {
                CovariateKind::Continuous => {
                    if is_missing_token(tok) {
                        CovariateValue::Missing
                    } else {
                        let v: f64 = tok.parse().map_err(|_| Error::Parse {
                            row,
                            message: format!("covariate `{}`: `{tok}` is not a number", e.name),
                        })?;
                        if !v.is_finite() {
                            return Err(Error::Parse { row, message: format!("covariate `{}` not finite", e.name) });
                        }
                        CovariateValue::Number(v)
                    }
                }
                CovariateKind::Categorical { levels } => {
                    if is_missing_token(tok) {
                        CovariateValue::Missing
                    } else if let Some(l) = levels.iter().find(|l| l.as_str() == tok) {
                        CovariateValue::Level(l.clone())
                    } else {
                        match e.missing_policy {
                            MissingPolicy::Lenient => CovariateValue::Missing,
                            MissingPolicy::Strict => {
                                return Err(Error::UnknownLevel { covariate: e.name.clone(), token: tok.to_string() })
                            }
                        }
                    }
                }
                CovariateKind::IncomeQuintile => {
                    if is_missing_token(tok) {
                        raw_income[k].push(None);
                    } else {
                        let v: f64 = tok.parse().map_err(|_| Error::Parse {
                            row,
                            message: format!("covariate `{}`: `{tok}` is not a number", e.name),
                        })?;
                        check_income_midpoint(v).map_err(|err| Error::Parse { row, message: err.to_string() })?;
                        raw_income[k].push(Some(v));
                    }
                    // resolved below once the whole column is known
                    CovariateValue::Missing
                }
            };
            covariates.push(value);
        }

        let mut outcomes = BTreeMap::new();
        for (c, name) in &outcome_cols {
            let tok = field(*c);
            if is_missing_token(tok) {
                continue;
            }
            let v: f64 = tok
                .parse()
                .map_err(|_| Error::Parse { row, message: format!("outcome `{name}`: `{tok}` is not a number") })?;
            outcomes.insert(name.clone(), v);
        }
        subjects.push(Subject { id, covariates, activities, outcomes });
    }

    for (k, e) in schema.entries.iter().enumerate() {
        if e.kind == CovariateKind::IncomeQuintile {
            let observed: Vec<f64> = raw_income[k].iter().flatten().copied().collect();
            if observed.is_empty() {
                continue;
            }
            let q = IncomeQuintiles::from_incomes(&observed)?;
            for (s, raw) in subjects.iter_mut().zip(&raw_income[k]) {
                if let Some(v) = raw {
                    s.covariates[k] = CovariateValue::Level(format!("Q{}", q.quintile(*v)?));
                }
            }
        }
    }
    Cohort::new(schema.clone(), subjects)
}

/// Writes a cohort in the layout `load_cohort` reads. Income-quintile
/// covariates cannot be written back because only the quintile is kept.
pub fn write_cohort<W: Write>(cohort: &Cohort, writer: W, delimiter: u8) -> Result<()> {
    if let Some(e) = cohort.schema.entries.iter().find(|e| e.kind == CovariateKind::IncomeQuintile) {
        return Err(Error::Schema(format!("income-quintile covariate `{}` cannot be written back", e.name)));
    }
    let outcomes: Vec<String> = cohort.outcome_names().into_iter().collect();
    let mut w = csv::WriterBuilder::new().delimiter(delimiter).from_writer(writer);
    let mut header = vec![ID_COLUMN.to_string(), ACTIVITIES_COLUMN.to_string()];
    header.extend(cohort.schema.entries.iter().map(|e| e.name.clone()));
    header.extend(outcomes.iter().cloned());
    w.write_record(&header)?;
    for s in &cohort.subjects {
        let mut row = vec![s.id.clone(), s.activities.iter().cloned().collect::<Vec<_>>().join(";")];
        row.extend(s.covariates.iter().map(|v| match v {
            CovariateValue::Number(x) => x.to_string(),
            CovariateValue::Level(l) => l.clone(),
            CovariateValue::Missing => "NA".to_string(),
        }));
        row.extend(outcomes.iter().map(|o| s.outcomes.get(o).map(|y| y.to_string()).unwrap_or_default()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Self-rated health (1 = excellent .. 5 = poor) dichotomized to 1 for
/// excellent/very good/good and 0 for fair/poor.
pub fn dichotomize_health(rating: i64) -> Result<u8> {
    match rating {
        1..=3 => Ok(1),
        4 | 5 => Ok(0),
        _ => Err(Error::OutOfRange(format!("self-rated health must be in 1..=5, got {rating}"))),
    }
}

/// PHQ-9 total score: sum of nine items each scored 0..=3.
pub fn phq9_total(items: &[Option<i64>]) -> Result<u32> {
    if items.len() != 9 {
        return Err(Error::Input(format!("PHQ-9 needs 9 items, got {}", items.len())));
    }
    let mut total = 0u32;
    for (i, item) in items.iter().enumerate() {
        match item {
            Some(v @ 0..=3) => total += *v as u32,
            Some(v) => return Err(Error::OutOfRange(format!("PHQ-9 item {} = {v}, expected 0..=3", i + 1))),
            None => return Err(Error::Input(format!("PHQ-9 item {} missing", i + 1))),
        }
    }
    Ok(total)
}

pub const INCOME_MIDPOINTS: [f64; 11] =
    [5000.0, 15000.0, 25000.0, 35000.0, 45000.0, 55000.0, 65000.0, 75000.0, 85000.0, 95000.0, 105000.0];

fn check_income_midpoint(v: f64) -> Result<()> {
    if INCOME_MIDPOINTS.contains(&v) {
        Ok(())
    } else {
        Err(Error::OutOfRange(format!("{v} is not a recorded income midpoint")))
    }
}

/// Empirical quintile cut points of recorded incomes.
///
/// Cut `q` is the smallest recorded value whose empirical CDF reaches `q/5`.
/// A value equal to a cut point belongs to the lower quintile.
#[derive(Debug, Clone, PartialEq)]
pub struct IncomeQuintiles {
    pub cuts: [f64; 4],
}

impl IncomeQuintiles {
    pub fn from_incomes(incomes: &[f64]) -> Result<Self> {
        if incomes.is_empty() {
            return Err(Error::Input("no incomes to compute quintiles from".into()));
        }
        for &v in incomes {
            check_income_midpoint(v)?;
        }
        let mut sorted = incomes.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let mut cuts = [0.0; 4];
        for (q, cut) in cuts.iter_mut().enumerate() {
            // smallest 1-based rank r with r/n >= (q+1)/5
            let r = ((q + 1) * n).div_ceil(5).max(1);
            *cut = sorted[r - 1];
        }
        Ok(Self { cuts })
    }

    pub fn quintile(&self, v: f64) -> Result<u8> {
        check_income_midpoint(v)?;
        Ok(1 + self.cuts.iter().filter(|&&c| v > c).count() as u8)
    }
}

/// Quintile (1..=5) of `recorded` within the empirical distribution of `cohort_incomes`.
pub fn income_quintile(recorded: f64, cohort_incomes: &[f64]) -> Result<u8> {
    IncomeQuintiles::from_incomes(cohort_incomes)?.quintile(recorded)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActivityClass {
    Collision,
    Contact,
    NonContact,
    NonSport,
}

impl ActivityClass {
    pub const SPORTS: [ActivityClass; 3] = [ActivityClass::Collision, ActivityClass::Contact, ActivityClass::NonContact];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SportClassification {
    pub collision: BTreeSet<String>,
    pub contact: BTreeSet<String>,
    pub non_contact: BTreeSet<String>,
    #[serde(default)]
    pub non_sport: BTreeSet<String>,
}

impl Default for SportClassification {
    fn default() -> Self {
        Self::from_toml(DEFAULT_CLASSIFICATION).expect("shipped classification is valid")
    }
}

impl SportClassification {
    pub fn from_toml(s: &str) -> Result<Self> {
        let c: SportClassification = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen: BTreeMap<String, ActivityClass> = BTreeMap::new();
        for (class, names) in self.classes() {
            for n in names {
                if let Some(prev) = seen.insert(n.to_lowercase(), class) {
                    return Err(Error::Config(format!("activity `{n}` listed as both {prev:?} and {class:?}")));
                }
            }
        }
        Ok(())
    }

    fn classes(&self) -> [(ActivityClass, &BTreeSet<String>); 4] {
        [
            (ActivityClass::Collision, &self.collision),
            (ActivityClass::Contact, &self.contact),
            (ActivityClass::NonContact, &self.non_contact),
            (ActivityClass::NonSport, &self.non_sport),
        ]
    }

    /// Case-insensitive lookup.
    pub fn classify(&self, activity: &str) -> Option<ActivityClass> {
        self.classes()
            .into_iter()
            .find(|(_, names)| names.iter().any(|n| n.eq_ignore_ascii_case(activity)))
            .map(|(c, _)| c)
    }
}

/// Node membership predicate over a subject's activity classes. A subject
/// must also be exposed at the parent node to be exposed at a child.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Membership {
    /// Any activity at all.
    AnyActivity,
    /// At least one activity in the listed classes.
    Any(Vec<ActivityClass>),
    /// No activity in the listed classes.
    NoneOf(Vec<ActivityClass>),
    /// Every activity in the listed classes.
    Only(Vec<ActivityClass>),
}

impl Membership {
    pub fn matches(&self, classes: &BTreeSet<ActivityClass>) -> bool {
        match self {
            Membership::AnyActivity => !classes.is_empty(),
            Membership::Any(cs) => cs.iter().any(|c| classes.contains(c)),
            Membership::NoneOf(cs) => !cs.iter().any(|c| classes.contains(c)),
            Membership::Only(cs) => !classes.is_empty() && classes.iter().all(|c| cs.contains(c)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExposureStatus {
    Exposed,
    Control,
    NotApplicable,
}

/// Exposure status per subject (outer) and tree node (inner).
#[derive(Debug, Clone, PartialEq)]
pub struct ExposureMap {
    status: Vec<Vec<ExposureStatus>>,
}

impl ExposureMap {
    pub fn get(&self, subject: usize, node: usize) -> ExposureStatus {
        self.status[subject][node]
    }

    pub fn exposed_at(&self, node: usize) -> Vec<usize> {
        self.units_with(node, ExposureStatus::Exposed)
    }

    pub fn controls(&self) -> Vec<usize> {
        self.units_with(0, ExposureStatus::Control)
    }

    fn units_with(&self, node: usize, st: ExposureStatus) -> Vec<usize> {
        self.status.iter().enumerate().filter(|(_, row)| row[node] == st).map(|(i, _)| i).collect()
    }

    pub fn n_subjects(&self) -> usize {
        self.status.len()
    }
}

pub fn assign_exposures(cohort: &Cohort, tree: &ExposureTree, cls: &SportClassification) -> Result<ExposureMap> {
    let mut unknown = BTreeSet::new();
    let mut status = Vec::with_capacity(cohort.len());
    let order = tree.breadth_first();
    for s in &cohort.subjects {
        let mut classes = BTreeSet::new();
        for a in &s.activities {
            match cls.classify(a) {
                Some(c) => {
                    classes.insert(c);
                }
                None => {
                    unknown.insert(a.clone());
                }
            }
        }
        let mut row = vec![ExposureStatus::NotApplicable; tree.len()];
        if s.activities.is_empty() {
            row.fill(ExposureStatus::Control);
        } else {
            for &v in &order {
                let node = tree.node(v);
                let parent_ok = node.parent.is_none_or(|p| row[p] == ExposureStatus::Exposed);
                if parent_ok && node.membership.matches(&classes) {
                    row[v] = ExposureStatus::Exposed;
                }
            }
        }
        status.push(row);
    }
    if !unknown.is_empty() {
        return Err(Error::UnclassifiedActivity(unknown.into_iter().collect()));
    }
    Ok(ExposureMap { status })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnGroup {
    pub covariate: String,
    pub categorical: bool,
    pub columns: Range<usize>,
}

/// Numeric encoding of a cohort's covariates: one row per subject.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub data: DMatrix<f64>,
    pub labels: Vec<String>,
    pub groups: Vec<ColumnGroup>,
}

impl DesignMatrix {
    pub fn nrows(&self) -> usize {
        self.data.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.data.ncols()
    }

    pub fn select_rows(&self, rows: &[usize]) -> DMatrix<f64> {
        self.data.select_rows(rows)
    }

    /// Columns kept for regression: the first indicator of each categorical
    /// group is dropped as the reference level.
    pub fn reference_coded_columns(&self) -> Vec<usize> {
        self.groups
            .iter()
            .flat_map(|g| {
                let skip = usize::from(g.categorical && g.columns.len() > 1);
                g.columns.clone().skip(skip)
            })
            .collect()
    }
}

/// Expands categorical covariates into one indicator per observed level
/// (schema order, then `Missing`), passes continuous covariates through, and
/// median-imputes missing continuous values with an added indicator column.
pub fn encode_design_matrix(cohort: &Cohort) -> Result<DesignMatrix> {
    let n = cohort.len();
    let mut columns: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    let mut groups = Vec::new();
    for (k, e) in cohort.schema.entries.iter().enumerate() {
        let start = columns.len();
        let values = cohort.subjects.iter().map(|s| &s.covariates[k]);
        match e.levels() {
            None => {
                let mut observed = Vec::new();
                for v in values.clone() {
                    match v {
                        CovariateValue::Number(x) => observed.push(*x),
                        CovariateValue::Missing => {}
                        CovariateValue::Level(l) => {
                            return Err(Error::Schema(format!("continuous `{}` holds level `{l}`", e.name)))
                        }
                    }
                }
                let any_missing = observed.len() < n;
                let fill = if any_missing {
                    if observed.is_empty() {
                        return Err(Error::Input(format!("covariate `{}` is missing for every subject", e.name)));
                    }
                    median(&mut observed)
                } else {
                    0.0
                };
                columns.push(
                    values
                        .clone()
                        .map(|v| match v {
                            CovariateValue::Number(x) => *x,
                            _ => fill,
                        })
                        .collect(),
                );
                labels.push(e.name.clone());
                if any_missing {
                    columns.push(values.map(|v| f64::from(u8::from(*v == CovariateValue::Missing))).collect());
                    labels.push(format!("{}:{}", e.name, MISSING_LEVEL));
                }
            }
            Some(levels) => {
                let observed: HashSet<&str> = values
                    .clone()
                    .map(|v| match v {
                        CovariateValue::Level(l) => Ok(l.as_str()),
                        CovariateValue::Missing => Ok(MISSING_LEVEL),
                        CovariateValue::Number(_) => Err(Error::Schema(format!("categorical `{}` holds a number", e.name))),
                    })
                    .collect::<Result<_>>()?;
                let mut all_levels = levels.clone();
                all_levels.push(MISSING_LEVEL.to_string());
                for level in all_levels.iter().filter(|l| observed.contains(l.as_str())) {
                    columns.push(
                        values
                            .clone()
                            .map(|v| {
                                let hit = match v {
                                    CovariateValue::Level(l) => l == level,
                                    CovariateValue::Missing => level == MISSING_LEVEL,
                                    CovariateValue::Number(_) => false,
                                };
                                f64::from(u8::from(hit))
                            })
                            .collect(),
                    );
                    labels.push(format!("{}={}", e.name, level));
                }
            }
        }
        groups.push(ColumnGroup { covariate: e.name.clone(), categorical: e.levels().is_some(), columns: start..columns.len() });
    }
    let p = columns.len();
    let data = DMatrix::from_fn(n, p, |i, j| columns[j][i]);
    Ok(DesignMatrix { data, labels, groups })
}

pub(crate) fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
