use std::path::Path;
use std::process::Command;

use serde_json::Value;

fn run(dir: &Path, args: &[&str], toml: Option<&str>) -> (i32, Value) {
    let out = dir.join("out");
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_fallball"));
    cmd.args(args).arg("--out").arg(&out);
    if let Some(text) = toml {
        let cfg = dir.join("run.toml");
        std::fs::write(&cfg, text).unwrap();
        cmd.arg("--config").arg(cfg);
    }
    let code = cmd.output().unwrap().status.code().unwrap();
    let manifest = serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    (code, manifest)
}

#[test]
fn zero_event_budget_writes_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let (code, m) = run(dir.path(), &["simulate", "--masses", "3,2,1", "--max-events", "0"], None);
    assert_eq!(code, 0);
    assert_eq!(m["status"], "ok");
    let csv = std::fs::read_to_string(dir.path().join("out/events.csv")).unwrap();
    assert_eq!(csv, "t,sigma,q_1,q_2,q_3,v_pre_1,v_pre_2,v_pre_3,v_post_1,v_post_2,v_post_3\n");
    assert_eq!(m["outputs"][0]["file"], "events.csv");
    assert_eq!(m["outputs"][0]["sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn jsonl_events_follow_the_budget() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _) = run(
        dir.path(),
        &["simulate", "--max-events", "25", "--format", "jsonl"],
        Some("masses = [2.0, 1.0]\nseed = 3\n"),
    );
    assert_eq!(code, 0);
    let text = std::fs::read_to_string(dir.path().join("out/events.jsonl")).unwrap();
    let lines: Vec<Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 25);
    assert!(lines.windows(2).all(|w| w[0]["t"].as_f64() < w[1]["t"].as_f64()));
    assert_eq!(lines[0]["q"].as_array().unwrap().len(), 2);
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let (code, m) = run(
        dir.path(),
        &["simulate", "--masses", "1,1,1", "--max-events", "3"],
        Some("masses = [2.0, 1.0]\n[budget]\nmax_events = 50\n"),
    );
    assert_eq!(code, 0);
    assert_eq!(m["config"]["masses"].as_array().unwrap().len(), 3);
    assert_eq!(m["config"]["budget"]["max_events"], 3);
}

#[test]
fn config_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let (code, m) = run(dir.path(), &["simulate"], Some("masses = [1.0, 1.0]\nmass_profile = 3\n"));
    assert_eq!(code, 2);
    assert_eq!(m["status"], "config_error");
    assert!(m["error"].as_str().unwrap().contains("mass_profile"));

    let (code, m) = run(dir.path(), &["lyapunov"], Some("masses = [1.0, -1.0]\n"));
    assert_eq!(code, 2);
    assert!(m["error"].as_str().unwrap().contains("masses"));
}

#[test]
fn degenerate_states_are_refused_outside_the_demo() {
    let dir = tempfile::tempdir().unwrap();
    let toml = "masses = [1.0, 1.0, 1.0]\n[initial]\nq = [0.0, 0.0, 1.0]\nv = [0.0, 0.0, -1.0]\n[budget]\nmax_events = 3\n";
    let (code, m) = run(dir.path(), &["simulate"], Some(toml));
    assert_eq!(code, 6);
    assert_eq!(m["status"], "degenerate_refused");

    let (code, m) = run(dir.path(), &["degenerate-demo"], Some(toml));
    assert_eq!(code, 0);
    assert_eq!(m["diagnostics"]["frozen_particles"], 2);
    let csv = std::fs::read_to_string(dir.path().join("out/events.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.lines().skip(1).all(|l| l.split(',').nth(1) == Some("2")));
}

#[test]
fn accumulation_guard_reports_the_burst() {
    let dir = tempfile::tempdir().unwrap();
    let toml = "masses = [3.0, 2.0, 1.0]\n[initial]\nq = [1e-8, 2e-8, 0.9]\nv = [0.0, 0.0, 0.0]\n[budget]\nmax_events = 100000\n";
    let (code, m) = run(dir.path(), &["simulate"], Some(toml));
    assert_eq!(code, 4);
    assert_eq!(m["status"], "accumulation_guard");
    let guard = &m["diagnostics"]["guard"];
    assert_eq!(guard["tail_profile"].as_array().unwrap().len(), 100);
    // the partial log is kept and digested
    assert!(m["outputs"][0]["sha256"].is_string());
}

#[test]
fn simultaneous_collisions_exit_with_code_three() {
    let dir = tempfile::tempdir().unwrap();
    let toml = "masses = [1.0, 1.0, 1.0]\n[initial]\nq = [0.0, 0.0, 0.9]\nv = [1e-6, 1e-6, 0.0]\n";
    let (code, m) = run(dir.path(), &["simulate"], Some(toml));
    assert_eq!(code, 3);
    assert_eq!(m["diagnostics"]["singularity"]["separation"], 0.0);
}

#[test]
fn short_lyapunov_runs_are_inconclusive() {
    let dir = tempfile::tempdir().unwrap();
    let (code, m) = run(dir.path(), &["lyapunov", "--masses", "3,2,1", "--n-returns", "200"], None);
    assert_eq!(code, 5);
    assert_eq!(m["status"], "inconclusive");
    let spectrum: Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("out/spectrum.json")).unwrap()).unwrap();
    assert_eq!(spectrum["zero_count"]["status"], "inconclusive");
    assert_eq!(spectrum["flow_exponents"].as_array().unwrap().len(), 4);
}

#[test]
fn sweep_writes_one_row_per_grid_point() {
    let dir = tempfile::tempdir().unwrap();
    let toml = "[budget]\nn_returns = 2000\n[sweep]\nn = 2\nratios = [1.0, 2.0]\nprofiles = [[1.0, 3.0]]\n";
    let (code, m) = run(dir.path(), &["sweep"], Some(toml));
    assert_eq!(code, 0);
    assert_eq!(m["diagnostics"]["grid_points"], 3);
    let csv = std::fs::read_to_string(dir.path().join("out/sweep.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[3].contains("1;3,unordered"));
}

#[test]
fn cone_and_neutral_summaries() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _) = run(dir.path(), &["cone", "--masses", "3,2,1", "--samples", "3", "--horizon", "200"], None);
    assert_eq!(code, 0);
    let cone: Value = serde_json::from_slice(&std::fs::read(dir.path().join("out/cone.json")).unwrap()).unwrap();
    assert_eq!(cone["points"], 3);
    assert_eq!(cone["entry_fraction"], 1.0);

    let (code, _) = run(dir.path(), &["neutral", "--masses", "3,2,1", "--samples", "3", "--horizon", "100"], None);
    assert_eq!(code, 0);
    let n: Value = serde_json::from_slice(&std::fs::read(dir.path().join("out/neutral.json")).unwrap()).unwrap();
    assert_eq!(n["collapsed_h"], 3);
    assert!(dir.path().join("out/neutral_curve.csv").exists());
}
