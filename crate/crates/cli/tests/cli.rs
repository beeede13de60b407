use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn treematch(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_treematch")).args(args).output().unwrap();
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn study() -> String {
    configs().join("study.toml").to_string_lossy().into_owned()
}

#[test]
fn run_is_byte_identical_across_invocations() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for dir in [&a, &b] {
        treematch(&["run", "--config", &study(), "--out", dir.path().to_str().unwrap()]);
    }
    for file in ["report.json", "report.txt"] {
        let x = fs::read(a.path().join(file)).unwrap();
        let y = fs::read(b.path().join(file)).unwrap();
        assert!(!x.is_empty());
        assert_eq!(x, y, "{file} differs");
    }
    let text = fs::read_to_string(a.path().join("report.txt")).unwrap();
    assert!(text.contains("Extreme propensity score"));
    let json: serde_json::Value = serde_json::from_slice(&fs::read(a.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(json["nodes"].as_array().unwrap().len(), 7);
}

#[test]
fn allocate_prints_levels() {
    let out = String::from_utf8(treematch(&["allocate"]).stdout).unwrap();
    assert!(out.contains("no collision\t0.016667"), "{out}");
    assert!(out.contains("any activity\t0.050000"));
    let json = treematch(&["allocate", "--format", "json", "--alpha", "0.1"]).stdout;
    let v: serde_json::Value = serde_json::from_slice(&json).unwrap();
    assert_eq!(v["alpha"], 0.1);
}

#[test]
fn match_and_balance_for_one_node() {
    let out = String::from_utf8(treematch(&["match", "--config", &study(), "--node", "any sports"]).stdout).unwrap();
    assert!(out.starts_with("# node: any sports\nk,feasible,total_distance,n_weak,max_asd\n"));
    assert!(out.contains("set,unit,role"));
    assert_eq!(out.matches("# node:").count(), 1);
    let out = String::from_utf8(treematch(&["balance", "--config", &study(), "--node", "no sports"]).stdout).unwrap();
    assert!(out.contains("# node: no sports"));
}

#[test]
fn test_lists_every_node() {
    let out = String::from_utf8(treematch(&["test", "--config", &study()]).stdout).unwrap();
    let lines: Vec<&str> = out.lines().collect();
    assert!(lines[0].starts_with("outcome,role,node"));
    assert_eq!(lines.len(), 1 + 7);
}

#[test]
fn unknown_node_is_an_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_treematch"))
        .args(["match", "--config", &study(), "--node", "chess"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("chess"));
}

#[test]
fn generate_then_simulate_small() {
    let dir = tempfile::tempdir().unwrap();
    let dgp = dir.path().join("dgp.toml");
    fs::write(&dgp, "reps = 3\nseed = 5\n[dgp]\nn = 120\n").unwrap();
    let csv = dir.path().join("cohort.csv");
    treematch(&["generate", "--dgp", dgp.to_str().unwrap(), "--out", csv.to_str().unwrap()]);
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 121);
    let out = String::from_utf8(treematch(&["simulate", "--dgp", dgp.to_str().unwrap()]).stdout).unwrap();
    assert!(out.starts_with("replications: 3\n"), "{out}");
    let again = String::from_utf8(treematch(&["simulate", "--dgp", dgp.to_str().unwrap()]).stdout).unwrap();
    assert_eq!(out, again);
}
