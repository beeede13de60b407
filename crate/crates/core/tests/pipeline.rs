use treematch::cohort::{load_cohort, write_cohort};
use treematch::hypotree::{ExposureTree, NodeStatus};
use treematch::pipeline::{run_study, MatchScope, NodeState, OutcomeRole, OutcomeSpec, StudyConfig, StudyInputs, StudySettings};
use treematch::report::{render, Format};
use treematch::simharness::{generate_cohort, SyntheticDgp, OUTCOME};
use treematch::Error;

fn inputs(seed: u64) -> StudyInputs {
    let tree = ExposureTree::paper_default();
    let dgp = SyntheticDgp { seed, ..Default::default() };
    let cohort = generate_cohort(&dgp, &tree).unwrap();
    StudyInputs { cohort, tree, classification: SyntheticDgp::classification() }
}

fn settings() -> StudySettings {
    StudySettings {
        outcomes: vec![OutcomeSpec { name: OUTCOME.into(), role: OutcomeRole::CoPrimary, tau0: None }],
        ..Default::default()
    }
}

#[test]
fn full_tree_report_shape() {
    let inputs = inputs(2);
    let report = run_study(&inputs, &settings()).unwrap();
    assert_eq!(report.nodes.len(), 7);
    assert_eq!(report.n_subjects, 600);
    for n in &report.nodes {
        let c = &n.counts;
        assert!(c.after_exposed + c.trimmed_exposed <= c.before_exposed, "{}", n.label);
        if n.is_matched() {
            assert_eq!(c.after_exposed + c.trimmed_exposed, c.before_exposed, "{}", n.label);
            assert!(n.balance.is_some() && n.k.is_some());
            assert!(n.balance.as_ref().unwrap().max_asd_after() < 0.2);
        }
    }
    let tests = &report.outcomes[0].nodes;
    for (v, t) in tests.iter().enumerate() {
        let tested = matches!(t.status, NodeStatus::Rejected | NodeStatus::NotRejected);
        if let (true, Some(p)) = (tested, inputs.tree.node(v).parent) {
            assert_eq!(tests[p].status, NodeStatus::Rejected, "node {v} tested without a rejected parent");
        }
    }
    let text = render(&report, Format::Text).unwrap();
    assert!(text.contains("Before Matching") && text.contains("After matching"));
}

#[test]
fn lazy_scope_matches_only_what_testing_needs() {
    let inputs = inputs(3);
    let s = StudySettings { scope: MatchScope::Tested, ..settings() };
    let lazy = run_study(&inputs, &s).unwrap();
    let all = run_study(&inputs, &settings()).unwrap();
    assert_eq!(lazy.outcomes[0].nodes, all.outcomes[0].nodes);
    for (l, n) in lazy.nodes.iter().zip(&all.nodes) {
        if l.state != NodeState::Skipped {
            assert_eq!(l.k, n.k);
            assert_eq!(l.counts, n.counts);
        }
    }
}

#[test]
fn child_pools_come_from_the_parent_match() {
    let inputs = inputs(2);
    let report = run_study(&inputs, &settings()).unwrap();
    let tree = &inputs.tree;
    for (v, n) in report.nodes.iter().enumerate() {
        let Some(p) = tree.node(v).parent else { continue };
        let parent = &report.nodes[p];
        if let (Some(child), Some(pm)) = (&n.matched, &parent.matched) {
            let pe = pm.exposed_units();
            let pc = pm.control_units();
            assert!(child.exposed_units().iter().all(|u| pe.binary_search(u).is_ok()), "{}", n.label);
            assert!(child.control_units().iter().all(|u| pc.binary_search(u).is_ok()), "{}", n.label);
        }
    }
}

#[test]
fn missing_outcome_is_reported() {
    let inputs = inputs(2);
    let mut s = settings();
    s.outcomes.push(OutcomeSpec { name: "absent".into(), role: OutcomeRole::Secondary, tau0: None });
    assert!(run_study(&inputs, &s).is_err());
}

#[test]
fn cohort_round_trip_gives_the_same_report() {
    let inputs = inputs(4);
    let mut buf = Vec::new();
    write_cohort(&inputs.cohort, &mut buf, b',').unwrap();
    let reloaded = load_cohort(buf.as_slice(), &inputs.cohort.schema, b',').unwrap();
    let again = StudyInputs { cohort: reloaded, ..inputs.clone() };
    let a = render(&run_study(&inputs, &settings()).unwrap(), Format::Json).unwrap();
    let b = render(&run_study(&again, &settings()).unwrap(), Format::Json).unwrap();
    assert_eq!(a, b);
}

#[test]
fn config_rejects_unknown_keys_and_bad_ranges() {
    let base = "cohort = \"c.csv\"\n[[covariate]]\nname = \"age\"\nkind = \"continuous\"\n[[outcome]]\nname = \"y\"\nrole = \"co-primary\"\n";
    assert!(StudyConfig::from_toml(base).is_ok());
    let typo = format!("alpah = 0.1\n{base}");
    assert!(matches!(StudyConfig::from_toml(&typo), Err(Error::Config(_))));
    let k = format!("k_max = 11\n{base}");
    assert!(matches!(StudyConfig::from_toml(&k), Err(Error::Config(_))));
}
