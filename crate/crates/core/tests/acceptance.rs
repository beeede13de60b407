//! Acceptance suite: one line per criterion, non-zero exit on any failure.
//! Run with `cargo test -p treematch --test acceptance`.

mod common;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use treematch::balance::{match_weights, pooled_sd, standardized_differences, MatchWeights};
use treematch::fullmatch::{optimal_full_match, FullMatch, MatchedSet};
use treematch::hypotree::{allocate_alpha, derive_constraints, run_ordered_testing, AllocationPolicy, ExposureTree, NodeStatus};
use treematch::inference::{m_test, Approximation, MStatConfig, MatchedOutcomes};
use treematch::pipeline::{run_study, StudyConfig};
use treematch::propensity::{fit_logistic, trim_extremes};
use treematch::report::{self, Format};
use treematch::simharness::{monte_carlo, MonteCarloSummary, SimulationSpec};
use treematch::Error;

use common::{brute_force_full_match, matrix};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn simulate(file: &str) -> Result<MonteCarloSummary, String> {
    let path = configs().join(file);
    let text = fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    let spec = SimulationSpec::from_toml(&text).map_err(|e| e.to_string())?;
    let tree = match &spec.tree {
        Some(p) => ExposureTree::from_toml(&fs::read_to_string(configs().join(p)).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?,
        None => ExposureTree::paper_default(),
    };
    monte_carlo(&spec.dgp, &tree, &spec.study, spec.reps, spec.seed).map_err(|e| e.to_string())
}

fn labels(tree: &ExposureTree, sets: &[Vec<usize>]) -> BTreeSet<BTreeSet<String>> {
    sets.iter().map(|s| s.iter().map(|&v| tree.node(v).label.clone()).collect()).collect()
}

fn constraint_reproduction() -> Outcome {
    let tree = ExposureTree::paper_default();
    let got = match derive_constraints(&tree) {
        Ok(c) => labels(&tree, &c),
        Err(e) => return outcome(false, e.to_string()),
    };
    let want: BTreeSet<BTreeSet<String>> = [
        vec!["any activity"],
        vec!["any sports"],
        vec!["no sports", "any contact"],
        vec!["no sports", "no contact", "any collision"],
        vec!["no sports", "no contact", "no collision"],
    ]
    .iter()
    .map(|s| s.iter().map(|l| l.to_string()).collect())
    .collect();
    outcome(got == want, format!("{} constraint sets", got.len()))
}

fn allocation_reproduction() -> Outcome {
    let tree = ExposureTree::paper_default();
    let c = derive_constraints(&tree).unwrap();
    let a = match allocate_alpha(&c, tree.len(), 0.05, AllocationPolicy::KPlusOne) {
        Ok(a) => a,
        Err(e) => return outcome(false, e.to_string()),
    };
    let level = |l: &str| a.level(tree.find(l).unwrap());
    let third = ["no sports", "no contact", "any collision", "no collision"].iter().all(|l| (level(l) - 0.05 / 3.0).abs() < 1e-12);
    let full = (level("any activity") - 0.05).abs() < 1e-12 && (level("any sports") - 0.05).abs() < 1e-12;
    let max_sum = c.iter().map(|s| a.constraint_sum(s)).fold(0.0, f64::max);
    outcome(third && full && max_sum <= 0.05 + 1e-12, format!("finest levels {:.6}, max constraint sum {max_sum:.12}", level("no collision")))
}

fn ordered_testing_logic() -> Outcome {
    let tree = ExposureTree::paper_default();
    let c = derive_constraints(&tree).unwrap();
    let a = allocate_alpha(&c, tree.len(), 0.05, AllocationPolicy::KPlusOne).unwrap();
    let d = run_ordered_testing(&tree, &a, |n, _, _| {
        Ok::<f64, String>(match n.label.as_str() {
            "any activity" | "any sports" | "no contact" => 0.001,
            _ => 0.9,
        })
    });
    let status = |l: &str| d.status[tree.find(l).unwrap()];
    let pass = status("any activity") == NodeStatus::Rejected
        && status("any sports") == NodeStatus::Rejected
        && status("no contact") == NodeStatus::Rejected
        && status("no sports") == NodeStatus::NotRejected
        && status("any contact") == NodeStatus::NotRejected
        && status("any collision") == NodeStatus::NotTested
        && status("no collision") == NodeStatus::NotTested
        && d.is_ancestor_closed(&tree);
    outcome(pass, "any-contact subtree not tested")
}

fn random_instance(rng: &mut ChaCha8Rng, integer: bool) -> Vec<Vec<f64>> {
    let total = rng.random_range(2..=7);
    let ne = rng.random_range(1..total);
    let nc = total - ne;
    (0..ne)
        .map(|_| {
            (0..nc)
                .map(|_| if integer { f64::from(rng.random_range(0u8..25)) } else { rng.random_range(0.0..10.0) })
                .collect()
        })
        .collect()
}

fn matching_optimality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let (mut checked, mut infeasible, mut worst_rel) = (0usize, 0usize, 0.0f64);
    for i in 0..600 {
        let integer = i % 2 == 0;
        let d = random_instance(&mut rng, integer);
        let k = 1 + i % 3;
        let oracle = brute_force_full_match(&d, k);
        match (optimal_full_match(&matrix(&d), k), oracle) {
            (Ok(m), Some(best)) => {
                if integer && m.total_distance != best {
                    return outcome(false, format!("instance {i}: {} vs optimum {best}", m.total_distance));
                }
                let rel = (m.total_distance - best).abs() / best.max(1e-12);
                worst_rel = worst_rel.max(if best == 0.0 { m.total_distance } else { rel });
                checked += 1;
            }
            (Err(Error::Infeasible(_)), None) => infeasible += 1,
            (r, o) => return outcome(false, format!("instance {i}: solver {:?} vs oracle {o:?}", r.map(|m| m.total_distance))),
        }
    }
    outcome(
        checked >= 200 && worst_rel <= 1e-6,
        format!("{checked} optimal instances, {infeasible} infeasible agreed, worst relative gap {worst_rel:.2e}"),
    )
}

fn fwer_control() -> Outcome {
    match simulate("sim_null.toml") {
        Ok(s) => outcome(
            s.errors == 0 && s.replications >= 2000 && s.fwer <= 0.0597,
            format!("FWER {:.4} over {} replications (bound 0.0597)", s.fwer, s.completed),
        ),
        Err(e) => outcome(false, e),
    }
}

fn sets_from(rng: &mut ChaCha8Rng, shapes: &[(bool, usize)]) -> Vec<(Vec<f64>, Vec<f64>)> {
    shapes
        .iter()
        .map(|&(lone_exposed, many)| {
            let mut draw = |n: usize| (0..n).map(|_| StandardNormal.sample(&mut *rng)).collect::<Vec<f64>>();
            if lone_exposed {
                (draw(1), draw(many))
            } else {
                (draw(many), draw(1))
            }
        })
        .collect()
}

fn pvalue_validity() -> Outcome {
    let exact = MStatConfig { mode: Approximation::Exact, ..Default::default() };
    let normal = MStatConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(606);

    // exchangeable outcomes on one fixed structure
    let shapes: Vec<(bool, usize)> = (0..10).map(|t| (t % 3 != 2, 1 + t % 2)).collect();
    let grid = [0.01, 0.05, 0.1, 0.2];
    let mut hits = [0usize; 4];
    let draws = 2000;
    for _ in 0..draws {
        let data = MatchedOutcomes::from_sets(sets_from(&mut rng, &shapes)).unwrap();
        let p = m_test(&data, 0.0, &exact).unwrap().pvalue;
        for (h, &u) in hits.iter_mut().zip(&grid) {
            if p <= u {
                *h += 1;
            }
        }
    }
    let rates: Vec<f64> = hits.iter().map(|&h| h as f64 / draws as f64).collect();
    let valid = rates.iter().zip(&grid).all(|(r, u)| *r <= u + 0.01);

    let instances = 100;
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let n_sets = rng.random_range(8..=12);
        let shapes: Vec<(bool, usize)> = (0..n_sets).map(|_| (rng.random_bool(0.5), rng.random_range(1..=2))).collect();
        let data = MatchedOutcomes::from_sets(sets_from(&mut rng, &shapes)).unwrap();
        let a = m_test(&data, 0.0, &exact).unwrap().pvalue;
        let b = m_test(&data, 0.0, &normal).unwrap().pvalue;
        worst = worst.max((a - b).abs());
    }
    outcome(
        valid && worst <= 0.05,
        format!(
            "Pr(p<=u) at u=0.01/0.05/0.1/0.2: {:.4}/{:.4}/{:.4}/{:.4}; max |normal - exact| {worst:.4} over {instances} instances",
            rates[0], rates[1], rates[2], rates[3]
        ),
    )
}

fn ci_coverage() -> Outcome {
    match simulate("sim_coverage.toml") {
        Ok(s) => {
            let root = &s.nodes[0];
            let cov = root.coverage.unwrap_or(0.0);
            outcome(
                s.errors == 0 && s.replications >= 1000 && cov >= 0.93,
                format!("coverage {cov:.4} over {} intervals at `{}` (true effect {:?})", root.tested, root.label, root.effect),
            )
        }
        Err(e) => outcome(false, e),
    }
}

fn balance_machinery() -> Outcome {
    let x = DMatrix::from_column_slice(4, 1, &[1.0, 3.0, 0.0, 2.0]);
    let sd = pooled_sd(&x, &[0, 1], &[2, 3]).unwrap();
    let delta = standardized_differences(&x, &MatchWeights::uniform(&[0, 1], &[2, 3]), &sd).unwrap()[0];
    let hand = (delta - 1.0 / 2f64.sqrt()).abs() < 1e-12;

    let m = FullMatch {
        sets: vec![
            MatchedSet { exposed: vec![0], controls: vec![10, 11] },
            MatchedSet { exposed: vec![1, 2], controls: vec![12] },
        ],
        k: 2,
        total_distance: 0.0,
        unmatched: Vec::new(),
    };
    let w = match_weights(&m).unwrap();
    let cw: Vec<f64> = w.controls.iter().map(|c| c.1).collect();
    let normalized = cw.iter().zip([1.0 / 6.0, 1.0 / 6.0, 2.0 / 3.0]).all(|(a, b)| (a - b).abs() < 1e-12);

    match simulate("sim_confounded.toml") {
        Ok(s) => {
            let root = &s.nodes[0];
            let share = root.balanced as f64 / root.matched.max(1) as f64;
            outcome(
                hand && normalized && s.errors == 0 && root.matched == s.replications && share >= 0.95 && root.weak_increased == 0,
                format!(
                    "delta {delta:.4}, weights {cw:.4?}; max ASD < 0.2 in {share:.3} of {} matches (pre-match mean max ASD {:.3}), weak count rose in {}",
                    root.matched,
                    root.mean_max_asd_before.unwrap_or(f64::NAN),
                    root.weak_increased
                ),
            )
        }
        Err(e) => outcome(false, e),
    }
}

fn logistic_fit() -> Outcome {
    let x1 = [0.5, 1.2, -0.3, 2.0, 0.0, 1.5, -1.0, 0.8, 2.5, -0.6];
    let x2 = [1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0];
    let z = [false, true, false, true, true, false, false, true, true, false];
    // independent reference: statsmodels GLM(Binomial), tol 1e-14
    let golden = [-0.38893100004508047, 1.5430348613370097, -1.517562630139916];
    let x = DMatrix::from_fn(10, 2, |i, j| if j == 0 { x1[i] } else { x2[i] });
    let m = fit_logistic(&x, &z).unwrap();
    let gap = m.coefficients.iter().zip(golden).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    let t = trim_extremes(&[0, 1, 2, 3, 4, 5], &[0.3, 0.6, 0.9, 0.2, 0.5, 0.8], &[true, true, true, false, false, false]);
    let rule = t.dropped_exposed == vec![2] && t.dropped_control == vec![3];
    let same = trim_extremes(&[0, 1, 2, 3], &[0.2, 0.7, 0.2, 0.7], &[true, true, false, false]);
    let overlap = same.retained.len() == 4;
    let apart = trim_extremes(&[0, 1, 2, 3], &[0.8, 0.9, 0.1, 0.2], &[true, true, false, false]);
    let none = apart.retained.is_empty() && apart.dropped_exposed.len() == 2 && apart.dropped_control.len() == 2;
    outcome(gap < 1e-6 && rule && overlap && none, format!("max coefficient gap {gap:.2e}; trimming examples reproduced"))
}

fn end_to_end_determinism() -> Outcome {
    let run = |dir: &Path| -> Result<(Vec<u8>, Vec<u8>), String> {
        let (cfg, inputs) = StudyConfig::load(&configs().join("study.toml")).map_err(|e| e.to_string())?;
        let r = run_study(&inputs, &cfg.settings).map_err(|e| e.to_string())?;
        report::emit_report(&r, dir).map_err(|e| e.to_string())?;
        let json = fs::read(dir.join("report.json")).map_err(|e| e.to_string())?;
        let text = fs::read(dir.join("report.txt")).map_err(|e| e.to_string())?;
        if report::render(&r, Format::Json).map_err(|e| e.to_string())?.as_bytes() != json.as_slice() {
            return Err("rendered JSON differs from file".into());
        }
        Ok((json, text))
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    match (run(a.path()), run(b.path())) {
        (Ok(x), Ok(y)) => outcome(x == y, format!("report.json {} bytes, report.txt {} bytes", x.0.len(), x.1.len())),
        (Err(e), _) | (_, Err(e)) => outcome(false, e),
    }
}

fn main() -> ExitCode {
    type Criterion = (&'static str, Duration, fn() -> Outcome);
    let criteria: [Criterion; 10] = [
        ("constraint reproduction", Duration::from_secs(1), constraint_reproduction),
        ("allocation reproduction", Duration::from_secs(1), allocation_reproduction),
        ("ordered-testing logic", Duration::from_secs(1), ordered_testing_logic),
        ("matching optimality", Duration::from_secs(30), matching_optimality),
        ("FWER control", Duration::from_secs(20 * 60), fwer_control),
        ("p-value validity", Duration::from_secs(20 * 60), pvalue_validity),
        ("CI coverage", Duration::from_secs(20 * 60), ci_coverage),
        ("balance machinery", Duration::from_secs(60), balance_machinery),
        ("logistic fit", Duration::from_secs(1), logistic_fit),
        ("end-to-end determinism", Duration::from_secs(60), end_to_end_determinism),
    ];
    let mut failed = 0;
    for (i, (name, budget, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let r = check();
        let elapsed = start.elapsed();
        let pass = r.pass && elapsed <= *budget;
        if !pass {
            failed += 1;
        }
        println!(
            "{} {:>2} {name}: {} [{:.2}s, budget {}s]",
            if pass { "PASS" } else { "FAIL" },
            i + 1,
            r.detail,
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
