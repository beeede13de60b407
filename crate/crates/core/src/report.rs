//! Rendering of study reports as JSON or plain-text tables.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::balance::Flag;
use crate::pipeline::{NodeState, OutcomeRole, StudyReport};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Json,
    Text,
}

pub fn render(report: &StudyReport, format: Format) -> Result<String> {
    match format {
        Format::Json => {
            let mut s = serde_json::to_string_pretty(report)?;
            s.push('\n');
            Ok(s)
        }
        Format::Text => Ok(render_text(report)),
    }
}

/// Writes `report.json` and `report.txt` into `dir`.
pub fn emit_report(report: &StudyReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.json"), render(report, Format::Json)?)?;
    fs::write(dir.join("report.txt"), render(report, Format::Text)?)?;
    Ok(())
}

fn num(v: f64, places: usize) -> String {
    if v.is_nan() {
        "-".to_string()
    } else if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.to_string()
    } else {
        let s = format!("{v:.places$}");
        // no "-0.0000" for values that round to zero
        match s.strip_prefix('-') {
            Some(rest) if rest.bytes().all(|b| b == b'0' || b == b'.') => rest.to_string(),
            _ => s,
        }
    }
}

fn state_name(s: &NodeState) -> &'static str {
    match s {
        NodeState::Matched => "matched",
        NodeState::Failed { .. } => "FAILED",
        NodeState::Skipped => "skipped",
    }
}

fn render_text(r: &StudyReport) -> String {
    let mut out = String::new();
    let width = r.nodes.iter().map(|n| n.label.len()).max().unwrap_or(4).max(4);
    let _ = writeln!(out, "subjects: {}", r.n_subjects);
    let _ = writeln!(out, "seed: {}", r.seed);
    let _ = writeln!(out);

    let _ = writeln!(out, "Level allocation ({}, alpha = {})", r.allocation.policy, r.allocation.alpha);
    for (n, level) in r.nodes.iter().zip(&r.allocation.levels) {
        let _ = writeln!(out, "  {:<width$}  {}", n.label, num(*level, 6));
    }
    let _ = writeln!(out, "Constraints");
    for c in &r.constraint_labels {
        let _ = writeln!(out, "  {{{}}}", c.join(", "));
    }
    let _ = writeln!(out);

    let _ = writeln!(
        out,
        "{:<width$}  {:>17}  {:>26}  {:>17}  {:>3}  state",
        "node", "Before Matching", "Extreme propensity score", "After matching", "k"
    );
    let _ = writeln!(out, "{:<width$}  {:>8} {:>8}  {:>12} {:>13}  {:>8} {:>8}", "", "exposed", "control", "exposed", "control", "exposed", "control");
    for n in &r.nodes {
        let c = &n.counts;
        let _ = writeln!(
            out,
            "{:<width$}  {:>8} {:>8}  {:>12} {:>13}  {:>8} {:>8}  {:>3}  {}",
            n.label,
            c.before_exposed,
            c.before_control,
            c.trimmed_exposed,
            c.trimmed_control,
            c.after_exposed,
            c.after_control,
            n.k.map(|k| k.to_string()).unwrap_or_else(|| "-".into()),
            state_name(&n.state),
        );
        if let NodeState::Failed { reason } = &n.state {
            let _ = writeln!(out, "{:<width$}    reason: {reason}", "");
        }
    }

    for n in &r.nodes {
        let Some(b) = &n.balance else { continue };
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "Balance: {} (weak before {}, weak after {}, max ASD after {})",
            n.label,
            b.n_weak_before(),
            b.n_weak_after(),
            num(b.max_asd_after(), 4)
        );
        let cw = b.rows.iter().map(|row| row.label.len()).max().unwrap_or(9).max(9);
        let _ = writeln!(out, "  {:<cw$}  {:>8}  {:>8}  flag", "covariate", "before", "after");
        for row in &b.rows {
            let flag = match Flag::of(row.after) {
                Flag::Ok => "",
                Flag::Weak => "weak",
                Flag::Severe => "SEVERE",
            };
            let _ = writeln!(out, "  {:<cw$}  {:>8}  {:>8}  {flag}", row.label, num(row.before, 4), num(row.after, 4));
        }
    }

    for o in &r.outcomes {
        let _ = writeln!(out);
        let role = match o.role {
            OutcomeRole::CoPrimary => "co-primary",
            OutcomeRole::Secondary => "secondary, not confirmatory",
        };
        let _ = writeln!(out, "Outcome: {} ({role})", o.name);
        let _ = writeln!(
            out,
            "  {:<width$}  {:>8}  {:>8}  {:>8}  {:>8}  {:>10}  {:>10}  {:>9}  decision",
            "node", "tau0", "level", "deviate", "p", "lower", "upper", "estimate"
        );
        for (n, t) in r.nodes.iter().zip(&o.nodes) {
            match &t.result {
                Some(res) => {
                    let _ = writeln!(
                        out,
                        "  {:<width$}  {:>8}  {:>8}  {:>8}  {:>8}  {:>10}  {:>10}  {:>9}  {}",
                        n.label,
                        num(res.tau0, 3),
                        num(res.level, 4),
                        num(res.deviate, 3),
                        num(res.pvalue, 4),
                        num(res.lower, 4),
                        num(res.upper, 4),
                        num(res.estimate, 4),
                        t.status.short()
                    );
                }
                None => {
                    let _ = writeln!(
                        out,
                        "  {:<width$}  {:>8}  {:>8}  {:>8}  {:>8}  {:>10}  {:>10}  {:>9}  {}",
                        n.label, "-", "-", "-", "-", "-", "-", "-",
                        t.status.short()
                    );
                }
            }
            if let Some(e) = &t.error {
                let _ = writeln!(out, "  {:<width$}    {e}", "");
            }
        }
    }
    out
}
