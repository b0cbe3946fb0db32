//! End-to-end runs of the `guillotine-sim` binary.

use std::path::Path;
use std::process::{Command, Output};

fn sim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_guillotine-sim")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn scenario(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name).display().to_string()
}

#[test]
fn run_writes_logs_and_replay_verifies_them() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("events.jsonl");
    let audit = dir.path().join("audit.jsonl");
    let report = dir.path().join("report.json");
    let o = sim(&[
        "run",
        "--scenario",
        &scenario("severed_link.json"),
        "--log",
        log.to_str().unwrap(),
        "--audit-log",
        audit.to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("PASSED: severed_link"));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(report["final_level"], "standard");
    assert!(std::fs::read_to_string(&audit).unwrap().lines().count() > 0);

    let o = sim(&["replay", "--log", log.to_str().unwrap(), "--verify"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("identical"));
}

#[test]
fn tampered_log_fails_verification() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("events.jsonl");
    assert!(sim(&["run", "--workload", "benign_echo", "--ticks", "200", "-q", "--log", log.to_str().unwrap()]).status.success());
    let text = std::fs::read_to_string(&log).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_owned).collect();
    let victim = lines.len() / 2;
    let mut rec: serde_json::Value = serde_json::from_str(&lines[victim]).unwrap();
    rec["payload"] = serde_json::json!({"forged": true});
    lines[victim] = rec.to_string();
    std::fs::write(&log, lines.join("\n") + "\n").unwrap();
    let o = sim(&["replay", "--log", log.to_str().unwrap(), "--verify"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("DIVERGED"));
}

#[test]
fn failing_expectations_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.json");
    std::fs::write(&path, r#"{"guest": {"workload": "benign_echo"}, "ticks": 50, "expect": {"final_level": "offline"}}"#).unwrap();
    let o = sim(&["run", "--scenario", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAILED"));
}

#[test]
fn bad_input_exits_two() {
    assert_eq!(sim(&["run", "--workload", "no_such_workload"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.json");
    std::fs::write(&path, r#"{"script": [{"tick": 1, "cmd": "fly"}]}"#).unwrap();
    assert_eq!(sim(&["run", "--scenario", path.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn workloads_lists_the_library() {
    let o = sim(&["workloads"]);
    assert!(o.status.success());
    let out = stdout(&o);
    for name in ["benign_echo", "interrupt_flood", "covert_channel", "federation_attempt"] {
        assert!(out.contains(name), "{out}");
    }
}
