//! The `rddp` binary: exit codes, artifacts and error paths.

use std::path::Path;
use std::process::{Command, Output};

fn rddp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rddp")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, json: &str) -> String {
    let p = dir.join("config.json");
    std::fs::write(&p, json).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn linear_plan_converges_and_simulates() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = write_config(tmp.path(), r#"{"model": {"name": "double_integrator"}}"#);
    let o = rddp(&["plan", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("trajectory.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("t,x1,x2,u1"));
    assert_eq!(csv.lines().count(), 22);

    let o = rddp(&["simulate", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("simulation.json")).unwrap()).unwrap();
    let (cost, bound) = (report["cost"].as_f64().unwrap(), report["certified_bound"].as_f64().unwrap());
    assert!(cost <= bound * (1.0 + 1e-9));
    assert_eq!(report["label"], "exact");
}

#[test]
fn single_iteration_budget_reports_not_converged() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), r#"{"model": {"name": "random_stable"}, "planner": {"max_iters": 1}}"#);
    let o = rddp(&["plan", "--config", &cfg, "--out", tmp.path().to_str().unwrap(), "--strategy", "canonical"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(tmp.path().join("plan.json").exists());
}

#[test]
fn malformed_config_exits_with_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), r#"{"model": "#);
    let o = rddp(&["plan", "--config", &cfg, "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("config"));
    let o = rddp(&["plan", "--config", &cfg, "--qmethod", "newton"]);
    assert_ne!(o.status.code(), Some(0));
}

#[test]
fn schema_mismatch_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), r#"{"model": {"name": "scalar"}}"#);
    let dir = tmp.path().to_str().unwrap();
    assert_eq!(rddp(&["plan", "--config", &cfg, "--out", dir]).status.code(), Some(0));
    let plan = tmp.path().join("plan.json");
    let text = std::fs::read_to_string(&plan).unwrap().replacen("\"version\": 1", "\"version\": 99", 1);
    std::fs::write(&plan, text).unwrap();
    let o = rddp(&["simulate", "--config", &cfg, "--out", dir]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("99"));
}
