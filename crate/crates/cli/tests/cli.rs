//! Drives the built binary end to end.

use std::io::Write;
use std::process::{Command, Output, Stdio};

use serde_json::Value;

fn tabletop(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tabletop")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn bench_run_writes_report_and_logs() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("r.json");
    let logs = dir.path().join("logs");
    let o = tabletop(&[
        "bench", "run", "--modes", "full,baseline", "--tasks", "sim-01,sim-11", "--trials", "2",
        "--log-dir", logs.to_str().unwrap(), "--report-json", json.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let md = stdout(&o);
    assert!(md.contains("| Full agent | LLM baseline |"), "{md}");
    let report: Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(report["records"].as_array().unwrap().len(), 8);
    let files = walk(&logs);
    assert_eq!(files, 8);
}

fn walk(dir: &std::path::Path) -> usize {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            if p.is_dir() { walk(&p) } else { 1 }
        })
        .sum()
}

#[test]
fn bench_report_reemits_and_verifies() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("r.json");
    let o = tabletop(&["bench", "run", "--trials", "1", "--tasks", "sim-02", "--format", "json", "--out", json.to_str().unwrap()]);
    assert!(o.status.success());
    let original = std::fs::read_to_string(&json).unwrap();

    let o = tabletop(&["bench", "report", json.to_str().unwrap(), "--format", "json", "--verify"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).trim_end(), original.trim_end());

    // Tampering with an aggregate is caught.
    let mut v: Value = serde_json::from_str(&original).unwrap();
    v["aggregates"][0]["success"]["full"] = 12.5.into();
    std::fs::write(&json, serde_json::to_string(&v).unwrap()).unwrap();
    let o = tabletop(&["bench", "report", json.to_str().unwrap(), "--verify"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn sim_step_prints_outcomes_then_snapshot() {
    let o = tabletop(&["sim", "step", "--scenario", "5", "--seed", "7", r#"vlamove(pick="banana", place="red plate")"#, "done()"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let lines: Vec<Value> = stdout(&o).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0]["status"], "ok");
    assert_eq!(lines[1]["status"], "ok");
    assert!(lines[2]["objects"].is_array() || lines[2]["objects"].is_object());
}

#[test]
fn errors_exit_with_two() {
    assert_eq!(tabletop(&["sim", "step", "vlamove(banana)"]).status.code(), Some(2));
    assert_eq!(tabletop(&["bench", "run", "--tasks", "nope", "--trials", "1"]).status.code(), Some(2));
    assert_eq!(tabletop(&["bench", "report", "/nonexistent.json"]).status.code(), Some(2));
    assert_eq!(tabletop(&["bench", "run", "--modes", "fast"]).status.code(), Some(2));
}

#[test]
fn repl_runs_an_episode_from_stdin() {
    let mut child = Command::new(env!("CARGO_BIN_EXE_tabletop"))
        .args(["agent", "repl", "--scenario", "5", "--seed", "7"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(b"Place all the fruits into the red plate\n").unwrap();
    let o = child.wait_with_output().unwrap();
    assert!(o.status.success());
    let events: Vec<Value> = stdout(&o).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    for (i, e) in events.iter().enumerate() {
        assert_eq!(e["seq"], i as u64 + 1);
    }
    assert_eq!(events[0]["kind"], "scene_snapshot");
    assert_eq!(events[1]["kind"], "instruction");
    assert!(events.iter().any(|e| e["kind"] == "verdict" && e["payload"]["outcome"] == "success"));
    assert_eq!(events.last().unwrap()["kind"], "speech_out");
}

#[test]
fn check_passes_and_prints_one_line_per_check() {
    let o = tabletop(&["check"]);
    let out = stdout(&o);
    assert_eq!(o.status.code(), Some(0), "{out}");
    assert_eq!(out.lines().filter(|l| l.starts_with("[PASS]")).count(), 10, "{out}");
}
