//! Randomization inference for full matches with Huber-type m-statistics.
//!
//! Each matched set has one unit whose role is unique (the lone exposed unit,
//! or the lone control). Under the null the role is equally likely to fall on
//! any member of the set, independently across sets. For unit `j` of a set of
//! size `n` the score is `q_j = sum_{l != j} psi((r_j - r_l) / s) / (n - 1)`
//! where `r` are the responses with `tau0` removed from the exposed units.
//! The set contributes `q` of the lone exposed unit, or minus `q` of the lone
//! control, so every term is a mean of psi-scored exposed-minus-control
//! contrasts.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::fullmatch::FullMatch;
use crate::hypotree::NodeId;
use crate::{Error, Result};

/// Largest number of role assignments enumerated in exact mode.
pub const MAX_EXACT_ASSIGNMENTS: u64 = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Approximation {
    #[default]
    Normal,
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MStatConfig {
    pub hinge: f64,
    pub inner: f64,
    pub mode: Approximation,
}

impl Default for MStatConfig {
    fn default() -> Self {
        Self { hinge: 3.0, inner: 0.0, mode: Approximation::Normal }
    }
}

impl MStatConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.inner >= 0.0 && self.hinge > self.inner) {
            return Err(Error::Config(format!(
                "m-statistic needs hinge > inner >= 0, got hinge {} inner {}",
                self.hinge, self.inner
            )));
        }
        Ok(())
    }

    fn psi(&self, x: f64) -> f64 {
        let a = (x.abs().min(self.hinge) - self.inner).max(0.0);
        a.copysign(x)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct SetOutcomes {
    exposed: Vec<f64>,
    controls: Vec<f64>,
}

/// Outcomes arranged by matched set, ready for repeated testing.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchedOutcomes {
    sets: Vec<SetOutcomes>,
}

impl MatchedOutcomes {
    /// Looks up every matched unit's outcome; `name` labels missing units.
    pub fn new(m: &FullMatch, outcome: &str, lookup: impl Fn(usize) -> Option<f64>, name: impl Fn(usize) -> String) -> Result<Self> {
        let mut missing = Vec::new();
        let mut fetch = |units: &[usize]| -> Vec<f64> {
            units
                .iter()
                .filter_map(|&u| match lookup(u) {
                    Some(y) if y.is_finite() => Some(y),
                    _ => {
                        missing.push(name(u));
                        None
                    }
                })
                .collect()
        };
        let sets: Vec<SetOutcomes> =
            m.sets.iter().map(|s| SetOutcomes { exposed: fetch(&s.exposed), controls: fetch(&s.controls) }).collect();
        if !missing.is_empty() {
            return Err(Error::MissingOutcome { outcome: outcome.to_string(), units: missing });
        }
        Self::from_sets(sets.into_iter().map(|s| (s.exposed, s.controls)).collect())
    }

    /// Builds from `(exposed outcomes, control outcomes)` per set.
    pub fn from_sets(sets: Vec<(Vec<f64>, Vec<f64>)>) -> Result<Self> {
        if sets.len() < 2 {
            return Err(Error::Input(format!("randomization test needs at least 2 matched sets, got {}", sets.len())));
        }
        for (e, c) in &sets {
            if e.is_empty() || c.is_empty() || (e.len() > 1 && c.len() > 1) {
                return Err(Error::Input(format!("set with {} exposed and {} controls", e.len(), c.len())));
            }
        }
        Ok(Self { sets: sets.into_iter().map(|(exposed, controls)| SetOutcomes { exposed, controls }).collect() })
    }

    pub fn n_sets(&self) -> usize {
        self.sets.len()
    }

    /// Number of role assignments in the randomization distribution.
    pub fn n_assignments(&self) -> u64 {
        self.sets.iter().fold(1u64, |acc, s| acc.saturating_mul((s.exposed.len() + s.controls.len()) as u64))
    }

    fn contrasts(&self, tau0: f64) -> Vec<f64> {
        let mut out = Vec::new();
        for s in &self.sets {
            for &e in &s.exposed {
                for &c in &s.controls {
                    out.push(e - tau0 - c);
                }
            }
        }
        out
    }

    fn scale(&self, tau0: f64) -> Option<f64> {
        let mut abs: Vec<f64> = self.contrasts(tau0).iter().map(|c| c.abs()).collect();
        let med = crate::cohort::median(&mut abs);
        if med > 0.0 {
            return Some(med);
        }
        let mean = abs.iter().sum::<f64>() / abs.len() as f64;
        (mean > 0.0).then_some(mean)
    }

    /// Per set: the scores of all members with the observed lone unit first,
    /// each multiplied by the sign that maps the lone unit's score to an
    /// exposed-minus-control mean.
    fn scores(&self, tau0: f64, cfg: &MStatConfig, scale: f64) -> Vec<Vec<f64>> {
        self.sets
            .iter()
            .map(|s| {
                let (lone_exposed, r): (bool, Vec<f64>) = if s.exposed.len() == 1 {
                    (true, std::iter::once(s.exposed[0] - tau0).chain(s.controls.iter().copied()).collect())
                } else {
                    (false, std::iter::once(s.controls[0]).chain(s.exposed.iter().map(|y| y - tau0)).collect())
                };
                let n = r.len();
                let sign = if lone_exposed { 1.0 } else { -1.0 };
                (0..n)
                    .map(|j| {
                        let q: f64 = (0..n).filter(|&l| l != j).map(|l| cfg.psi((r[j] - r[l]) / scale)).sum();
                        sign * q / (n - 1) as f64
                    })
                    .collect()
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MTest {
    pub statistic: f64,
    pub deviate: f64,
    pub pvalue: f64,
}

/// Two-sided randomization test of a constant additive effect `tau0`.
pub fn m_test(data: &MatchedOutcomes, tau0: f64, cfg: &MStatConfig) -> Result<MTest> {
    cfg.validate()?;
    if !tau0.is_finite() {
        return Err(Error::Input(format!("tau0 must be finite, got {tau0}")));
    }
    if cfg.mode == Approximation::Exact && data.n_assignments() > MAX_EXACT_ASSIGNMENTS {
        return Err(Error::Capacity(format!(
            "exact randomization distribution has {} assignments, limit {MAX_EXACT_ASSIGNMENTS}",
            data.n_assignments()
        )));
    }
    let Some(scale) = data.scale(tau0) else {
        return Ok(MTest { statistic: 0.0, deviate: 0.0, pvalue: 1.0 });
    };
    let scores = data.scores(tau0, cfg, scale);
    let statistic: f64 = scores.iter().map(|q| q[0]).sum();
    let variance: f64 = scores.iter().map(|q| q.iter().map(|v| v * v).sum::<f64>() / q.len() as f64).sum();
    if variance <= 0.0 {
        return Ok(MTest { statistic, deviate: 0.0, pvalue: 1.0 });
    }
    let deviate = statistic / variance.sqrt();
    let pvalue = match cfg.mode {
        Approximation::Normal => {
            let n = Normal::standard();
            (2.0 * n.sf(deviate.abs())).min(1.0)
        }
        Approximation::Exact => exact_two_sided(&scores, statistic),
    };
    Ok(MTest { statistic, deviate, pvalue })
}

fn exact_two_sided(values: &[Vec<f64>], observed: f64) -> f64 {
    // relative slack so ties with the observed value count as hits
    let threshold = observed.abs() * (1.0 - 1e-9) - 1e-12;
    let mut hits = 0u64;
    let mut total = 0u64;
    fn walk(values: &[Vec<f64>], acc: f64, threshold: f64, hits: &mut u64, total: &mut u64) {
        match values.split_first() {
            None => {
                *total += 1;
                if acc.abs() >= threshold {
                    *hits += 1;
                }
            }
            Some((first, rest)) => {
                for v in first {
                    walk(rest, acc + v, threshold, hits, total);
                }
            }
        }
    }
    walk(values, 0.0, threshold, &mut hits, &mut total);
    hits as f64 / total as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub lower: f64,
    pub upper: f64,
    pub estimate: f64,
}

const ESTIMATE_TOLERANCE: f64 = 1e-6;
const ENDPOINT_TOLERANCE: f64 = 1e-5;
const MAX_DOUBLINGS: usize = 40;

/// Point estimate where the deviate crosses zero and the set of `tau0` not
/// rejected at level `alpha`.
pub fn ci_invert(data: &MatchedOutcomes, alpha: f64, cfg: &MStatConfig) -> Result<ConfidenceInterval> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::OutOfRange(format!("confidence level alpha must be in (0,1), got {alpha}")));
    }
    let contrasts = data.contrasts(0.0);
    let lo0 = contrasts.iter().copied().fold(f64::INFINITY, f64::min);
    let hi0 = contrasts.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let deviate = |t: f64| -> Result<f64> {
        let cfg = MStatConfig { mode: Approximation::Normal, ..*cfg };
        Ok(m_test(data, t, &cfg)?.deviate)
    };
    let (mut lo, mut hi) = (lo0, hi0);
    while hi - lo > ESTIMATE_TOLERANCE {
        let mid = 0.5 * (lo + hi);
        if deviate(mid)? > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let estimate = 0.5 * (lo + hi);
    let width = (hi0 - lo0).max(1e-3);
    let pvalue = |t: f64| -> Result<f64> { Ok(m_test(data, t, cfg)?.pvalue) };
    let lower = endpoint(estimate, -width, alpha, &pvalue)?;
    let upper = endpoint(estimate, width, alpha, &pvalue)?;
    Ok(ConfidenceInterval { lower: lower.min(estimate), upper: upper.max(estimate), estimate })
}

/// Walks from `start` in the direction of `step` to the last `tau0` with
/// p >= alpha. Returns an infinite endpoint when p never drops below alpha.
fn endpoint(start: f64, step: f64, alpha: f64, pvalue: &impl Fn(f64) -> Result<f64>) -> Result<f64> {
    let mut inside = start;
    let mut widened = false;
    loop {
        let mut w = step;
        let mut outside = None;
        for _ in 0..MAX_DOUBLINGS {
            let t = inside + w;
            if pvalue(t)? < alpha {
                outside = Some(t);
                break;
            }
            inside = t;
            w *= 2.0;
        }
        let Some(mut out) = outside else {
            return Ok(f64::INFINITY.copysign(step));
        };
        while (out - inside).abs() > ENDPOINT_TOLERANCE {
            let mid = 0.5 * (inside + out);
            if pvalue(mid)? >= alpha {
                inside = mid;
            } else {
                out = mid;
            }
        }
        // p should stay below alpha further out
        let probe = out + step;
        if pvalue(probe)? < alpha {
            return Ok(inside);
        }
        if widened {
            return Err(Error::NonMonotone(format!(
                "p-value returns above {alpha} beyond the interval endpoint near {inside}"
            )));
        }
        widened = true;
        inside = probe;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub label: String,
    pub tau0: f64,
    pub pvalue: f64,
    pub deviate: f64,
    pub lower: f64,
    pub upper: f64,
    pub estimate: f64,
    pub level: f64,
}

/// Test plus interval for one node and outcome.
pub fn test_node(label: &str, data: &MatchedOutcomes, tau0: f64, level: f64, cfg: &MStatConfig) -> Result<TestResult> {
    let t = m_test(data, tau0, cfg)?;
    let (lower, upper, estimate) = if level > 0.0 {
        let ci = ci_invert(data, level, cfg)?;
        (ci.lower, ci.upper, ci.estimate)
    } else {
        (f64::NEG_INFINITY, f64::INFINITY, f64::NAN)
    };
    Ok(TestResult { label: label.to_string(), tau0, pvalue: t.pvalue, deviate: t.deviate, lower, upper, estimate, level })
}

/// Memoized per-node p-values for the ordered-testing driver.
#[derive(Debug, Clone)]
pub struct NodePValueProvider {
    data: HashMap<NodeId, std::result::Result<MatchedOutcomes, String>>,
    cfg: MStatConfig,
    cache: HashMap<(NodeId, u64), std::result::Result<f64, String>>,
    evaluations: usize,
}

impl NodePValueProvider {
    pub fn new(cfg: MStatConfig) -> Self {
        Self { data: HashMap::new(), cfg, cache: HashMap::new(), evaluations: 0 }
    }

    pub fn insert(&mut self, node: NodeId, data: MatchedOutcomes) {
        self.data.insert(node, Ok(data));
    }

    /// Records why a node has no usable match.
    pub fn insert_failure(&mut self, node: NodeId, reason: impl Into<String>) {
        self.data.insert(node, Err(reason.into()));
    }

    pub fn evaluations(&self) -> usize {
        self.evaluations
    }

    pub fn pvalue(&mut self, node: NodeId, tau0: f64) -> std::result::Result<f64, String> {
        let key = (node, tau0.to_bits());
        if let Some(r) = self.cache.get(&key) {
            return r.clone();
        }
        self.evaluations += 1;
        let r = match self.data.get(&node) {
            None => Err(format!("node {node} has no matched outcomes")),
            Some(Err(reason)) => Err(reason.clone()),
            Some(Ok(d)) => m_test(d, tau0, &self.cfg).map(|t| t.pvalue).map_err(|e| e.to_string()),
        };
        self.cache.insert(key, r.clone());
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn pairs(contrasts: &[f64]) -> MatchedOutcomes {
        MatchedOutcomes::from_sets(contrasts.iter().map(|&c| (vec![c], vec![0.0])).collect()).unwrap()
    }

    fn exact() -> MStatConfig {
        MStatConfig { mode: Approximation::Exact, ..Default::default() }
    }

    #[test]
    fn contrasts_at_tau0_give_p_one() {
        let d = pairs(&[2.0, 2.0, 2.0, 2.0]);
        let t = m_test(&d, 2.0, &MStatConfig::default()).unwrap();
        assert_eq!(t.deviate, 0.0);
        assert_eq!(t.pvalue, 1.0);
    }

    #[test]
    fn single_pair_exact_is_one() {
        // two sets are required, so pair the pair with a tied set that
        // contributes nothing
        let d = MatchedOutcomes::from_sets(vec![(vec![4.0], vec![1.0]), (vec![0.0], vec![0.0])]).unwrap();
        let t = m_test(&d, 0.0, &exact()).unwrap();
        assert_abs_diff_eq!(t.pvalue, 1.0, epsilon = 1e-12);
        assert!(MatchedOutcomes::from_sets(vec![(vec![4.0], vec![1.0])]).is_err());
    }

    #[test]
    fn eight_pairs_normal_close_to_exact() {
        let d = pairs(&[3.0, 5.0, -1.0, 2.0, 7.0, 4.0, -2.0, 6.0]);
        let n = m_test(&d, 0.0, &MStatConfig::default()).unwrap();
        let e = m_test(&d, 0.0, &exact()).unwrap();
        // brute force over the 2^8 sign flips as an independent check
        let s = {
            let mut a: Vec<f64> = [3.0f64, 5.0, 1.0, 2.0, 7.0, 4.0, 2.0, 6.0].to_vec();
            crate::cohort::median(&mut a)
        };
        let psi: Vec<f64> = [3.0f64, 5.0, -1.0, 2.0, 7.0, 4.0, -2.0, 6.0].iter().map(|c| (c / s).clamp(-3.0, 3.0)).collect();
        let obs: f64 = psi.iter().sum();
        let hits = (0..256u32)
            .filter(|mask| {
                let t: f64 = psi.iter().enumerate().map(|(i, p)| if mask >> i & 1 == 1 { -p.abs() } else { p.abs() }).sum();
                t.abs() >= obs.abs() - 1e-12
            })
            .count();
        assert_abs_diff_eq!(e.pvalue, hits as f64 / 256.0, epsilon = 1e-12);
        assert!((n.pvalue - e.pvalue).abs() <= 0.05, "normal {} exact {}", n.pvalue, e.pvalue);
    }

    #[test]
    fn constant_contrasts_estimate() {
        let d = pairs(&[3.0; 8]);
        let ci = ci_invert(&d, 0.05, &MStatConfig::default()).unwrap();
        assert_abs_diff_eq!(ci.estimate, 3.0, epsilon = 1e-5);
    }

    #[test]
    fn antisymmetric_outcomes_estimate_zero() {
        let d = MatchedOutcomes::from_sets(
            [1.0, 2.5, 0.7, 4.0, 1.3].iter().flat_map(|&v| [(vec![v], vec![-v]), (vec![-v], vec![v])]).collect(),
        )
        .unwrap();
        let ci = ci_invert(&d, 0.05, &MStatConfig::default()).unwrap();
        assert_abs_diff_eq!(ci.estimate, 0.0, epsilon = 1e-5);
        assert!(ci.lower < 0.0 && ci.upper > 0.0);
    }

    #[test]
    fn smaller_level_widens_interval() {
        let d = pairs(&[1.2, 0.4, 2.2, -0.3, 1.9, 0.8, 1.1, 2.7, 0.1, 1.5, 0.9, 1.7]);
        let wide = ci_invert(&d, 0.05 / 3.0, &MStatConfig::default()).unwrap();
        let narrow = ci_invert(&d, 0.05, &MStatConfig::default()).unwrap();
        assert!(wide.lower <= narrow.lower && narrow.upper <= wide.upper);
        assert!(narrow.lower <= narrow.estimate && narrow.estimate <= narrow.upper);
    }

    #[test]
    fn deviate_flips_with_contrasts() {
        let c = [1.2, 0.4, 2.2, -0.3, 1.9];
        let neg: Vec<f64> = c.iter().map(|v| -v).collect();
        let a = m_test(&pairs(&c), 0.0, &MStatConfig::default()).unwrap();
        let b = m_test(&pairs(&neg), 0.0, &MStatConfig::default()).unwrap();
        assert_abs_diff_eq!(a.deviate, -b.deviate, epsilon = 1e-12);
        assert_abs_diff_eq!(a.pvalue, b.pvalue, epsilon = 1e-12);
    }

    #[test]
    fn one_control_sets_score_exposed_minus_control() {
        // a 2:1 set mirrored as 1:2 with roles swapped and contrasts negated
        let a = MatchedOutcomes::from_sets(vec![(vec![3.0, 5.0], vec![1.0]), (vec![2.0], vec![0.5]), (vec![1.0], vec![2.0])])
            .unwrap();
        let b = MatchedOutcomes::from_sets(vec![(vec![1.0], vec![3.0, 5.0]), (vec![0.5], vec![2.0]), (vec![2.0], vec![1.0])])
            .unwrap();
        let ta = m_test(&a, 0.0, &MStatConfig::default()).unwrap();
        let tb = m_test(&b, 0.0, &MStatConfig::default()).unwrap();
        assert_abs_diff_eq!(ta.deviate, -tb.deviate, epsilon = 1e-12);
    }

    #[test]
    fn exact_capacity() {
        let d = MatchedOutcomes::from_sets((0..21).map(|i| (vec![i as f64], vec![0.0])).collect()).unwrap();
        assert!(matches!(m_test(&d, 0.0, &exact()), Err(Error::Capacity(_))));
    }

    #[test]
    fn bad_config() {
        let cfg = MStatConfig { hinge: 1.0, inner: 1.0, ..Default::default() };
        assert!(m_test(&pairs(&[1.0, 2.0]), 0.0, &cfg).is_err());
    }

    #[test]
    fn provider_memoizes() {
        let mut p = NodePValueProvider::new(MStatConfig::default());
        let d = pairs(&[1.0, 2.0, 3.0]);
        let direct = m_test(&d, 0.0, &MStatConfig::default()).unwrap().pvalue;
        p.insert(0, d);
        p.insert_failure(1, "matching failed");
        assert_eq!(p.pvalue(0, 0.0), Ok(direct));
        assert_eq!(p.pvalue(0, 0.0), Ok(direct));
        assert_eq!(p.evaluations(), 1);
        assert!(p.pvalue(1, 0.0).is_err());
        assert!(p.pvalue(2, 0.0).is_err());
    }
}
