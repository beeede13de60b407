//! Standardized differences before and after matching.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::fullmatch::FullMatch;
use crate::{Error, Result};

/// Lower edge of the weak-imbalance band (exclusive).
pub const WEAK: f64 = 0.1;
/// ASD at or above this marks the covariate as imbalanced.
pub const SEVERE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Flag {
    Ok,
    Weak,
    Severe,
}

impl Flag {
    pub fn of(delta: f64) -> Self {
        let a = delta.abs();
        if a >= SEVERE {
            Flag::Severe
        } else if a > WEAK {
            Flag::Weak
        } else {
            Flag::Ok
        }
    }
}

fn variance(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    values.map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

/// Per-column `sqrt((s1^2 + s0^2) / 2)` over the given rows of `x`.
pub fn pooled_sd(x: &DMatrix<f64>, exposed: &[usize], controls: &[usize]) -> Result<Vec<f64>> {
    if exposed.len() < 2 || controls.len() < 2 {
        return Err(Error::Input(format!(
            "pooled SD needs two units per group, got {} exposed and {} controls",
            exposed.len(),
            controls.len()
        )));
    }
    Ok((0..x.ncols())
        .map(|c| {
            let v1 = variance(exposed.iter().map(|&r| x[(r, c)]));
            let v0 = variance(controls.iter().map(|&r| x[(r, c)]));
            ((v1 + v0) / 2.0).sqrt()
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchWeights {
    pub exposed: Vec<(usize, f64)>,
    pub controls: Vec<(usize, f64)>,
}

impl MatchWeights {
    pub fn uniform(exposed: &[usize], controls: &[usize]) -> Self {
        let e = 1.0 / exposed.len() as f64;
        let c = 1.0 / controls.len() as f64;
        Self {
            exposed: exposed.iter().map(|&u| (u, e)).collect(),
            controls: controls.iter().map(|&u| (u, c)).collect(),
        }
    }
}

/// Exposed units weigh equally; a control in a set with `n1` exposed and `n0`
/// controls gets `n1 / n0` before normalization.
pub fn match_weights(m: &FullMatch) -> Result<MatchWeights> {
    if m.sets.is_empty() {
        return Err(Error::Input("empty match".into()));
    }
    let n1 = m.n_exposed() as f64;
    let mut exposed = Vec::new();
    let mut controls = Vec::new();
    for set in &m.sets {
        let v = set.exposed.len() as f64 / set.controls.len() as f64;
        exposed.extend(set.exposed.iter().map(|&u| (u, 1.0 / n1)));
        controls.extend(set.controls.iter().map(|&u| (u, v)));
    }
    let total: f64 = controls.iter().map(|c| c.1).sum();
    for c in &mut controls {
        c.1 /= total;
    }
    Ok(MatchWeights { exposed, controls })
}

/// Weighted difference in means scaled by `pooled`. Columns with zero pooled
/// SD come back as 0.
pub fn standardized_differences(x: &DMatrix<f64>, weights: &MatchWeights, pooled: &[f64]) -> Result<Vec<f64>> {
    if pooled.len() != x.ncols() {
        return Err(Error::Input(format!("{} pooled SDs for {} columns", pooled.len(), x.ncols())));
    }
    if let Some(&(u, _)) = weights.exposed.iter().chain(&weights.controls).find(|(u, _)| *u >= x.nrows()) {
        return Err(Error::Input(format!("weight for unit {u} outside the {} rows", x.nrows())));
    }
    Ok((0..x.ncols())
        .map(|c| {
            if pooled[c] == 0.0 {
                return 0.0;
            }
            let m1: f64 = weights.exposed.iter().map(|&(u, w)| w * x[(u, c)]).sum();
            let m0: f64 = weights.controls.iter().map(|&(u, w)| w * x[(u, c)]).sum();
            (m1 - m0) / pooled[c]
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceRow {
    pub label: String,
    pub before: f64,
    pub after: f64,
    pub pooled_sd: f64,
    /// Set when the pooled SD is zero and both deltas are 0 by convention.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceTable {
    pub rows: Vec<BalanceRow>,
}

impl BalanceTable {
    pub fn new(labels: &[String], pooled: &[f64], before: &[f64], after: &[f64]) -> Result<Self> {
        let n = labels.len();
        if pooled.len() != n || before.len() != n || after.len() != n {
            return Err(Error::Input("balance columns differ in length".into()));
        }
        let rows = (0..n)
            .map(|i| BalanceRow {
                label: labels[i].clone(),
                before: before[i],
                after: after[i],
                pooled_sd: pooled[i],
                degenerate: pooled[i] == 0.0,
            })
            .collect();
        Ok(Self { rows })
    }

    pub fn n_weak_before(&self) -> usize {
        self.rows.iter().filter(|r| Flag::of(r.before) == Flag::Weak).count()
    }

    pub fn n_weak_after(&self) -> usize {
        self.rows.iter().filter(|r| Flag::of(r.after) == Flag::Weak).count()
    }

    pub fn max_asd_before(&self) -> f64 {
        self.rows.iter().map(|r| r.before.abs()).fold(0.0, f64::max)
    }

    pub fn max_asd_after(&self) -> f64 {
        self.rows.iter().map(|r| r.after.abs()).fold(0.0, f64::max)
    }

    pub fn to_delimited(&self, delimiter: char) -> String {
        let d = delimiter;
        let mut out = format!("covariate{d}before{d}after{d}pooled_sd{d}flag_before{d}flag_after{d}degenerate\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{}{d}{:.4}{d}{:.4}{d}{:.4}{d}{}{d}{}{d}{}\n",
                r.label,
                r.before,
                r.after,
                r.pooled_sd,
                flag_name(Flag::of(r.before)),
                flag_name(Flag::of(r.after)),
                r.degenerate
            ));
        }
        out
    }
}

fn flag_name(f: Flag) -> &'static str {
    match f {
        Flag::Ok => "ok",
        Flag::Weak => "weak",
        Flag::Severe => "severe",
    }
}

/// Pre-match quantities for one matching problem, reused across candidate
/// matches. Rows of `x` are indexed by the unit ids used in the match.
#[derive(Debug, Clone)]
pub struct BalanceContext<'a> {
    pub x: &'a DMatrix<f64>,
    pub labels: &'a [String],
    pub pooled: Vec<f64>,
    pub before: Vec<f64>,
}

impl<'a> BalanceContext<'a> {
    pub fn new(x: &'a DMatrix<f64>, labels: &'a [String], exposed: &[usize], controls: &[usize]) -> Result<Self> {
        if labels.len() != x.ncols() {
            return Err(Error::Input(format!("{} labels for {} columns", labels.len(), x.ncols())));
        }
        let pooled = pooled_sd(x, exposed, controls)?;
        let before = standardized_differences(x, &MatchWeights::uniform(exposed, controls), &pooled)?;
        Ok(Self { x, labels, pooled, before })
    }

    pub fn evaluate(&self, m: &FullMatch) -> Result<BalanceTable> {
        let after = standardized_differences(self.x, &match_weights(m)?, &self.pooled)?;
        BalanceTable::new(self.labels, &self.pooled, &self.before, &after)
    }
}
