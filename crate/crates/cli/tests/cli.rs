use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn idonly(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_idonly")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn scenarios() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

const SMALL: &str = r#"{
  "protocol": "consensus",
  "nodes": [{"id": 3, "input": 1}, {"id": 8, "input": 0}, {"id": 12, "input": 1}, {"id": 40, "input": 0, "faulty": true}],
  "adversary": {"name": "equivocator"},
  "seed": 2
}"#;

#[test]
fn run_passes_and_prints_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let f = write(dir.path(), "s.json", SMALL);
    let o = idonly(&["run", f.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["passed"], true);
    assert!(report["wall_time_ms"].is_null());
}

#[test]
fn report_file_matches_stdout() {
    let dir = tempfile::tempdir().unwrap();
    let f = write(dir.path(), "s.json", SMALL);
    let out = dir.path().join("r.json");
    assert_eq!(code(&idonly(&["run", f.to_str().unwrap(), "--out", out.to_str().unwrap()])), 0);
    let stdout = idonly(&["run", f.to_str().unwrap()]).stdout;
    assert_eq!(fs::read(&out).unwrap(), stdout);
}

#[test]
fn duplicate_ids_are_input_errors() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL.replace("\"id\": 8", "\"id\": 3");
    let f = write(dir.path(), "dup.json", &text);
    assert_eq!(code(&idonly(&["run", f.to_str().unwrap()])), 2);
}

#[test]
fn unknown_fields_are_input_errors() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL.replace("\"seed\": 2", "\"seed\": 2, \"colour\": 1");
    let f = write(dir.path(), "bad.json", &text);
    assert_eq!(code(&idonly(&["run", f.to_str().unwrap()])), 2);
    assert_eq!(code(&idonly(&["run", dir.path().join("missing.json").to_str().unwrap()])), 2);
}

#[test]
fn trace_is_written_next_to_the_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL.replace("\"seed\": 2", "\"seed\": 2, \"output\": {\"trace\": \"t.tsv\"}");
    let f = write(dir.path(), "s.json", &text);
    assert_eq!(code(&idonly(&["run", f.to_str().unwrap()])), 0);
    let trace = fs::read_to_string(dir.path().join("t.tsv")).unwrap();
    assert!(trace.lines().count() > 10);
    assert!(trace.lines().all(|l| l.split('\t').count() == 4));
}

#[test]
fn bundled_suite_is_green() {
    let dir = tempfile::tempdir().unwrap();
    let o = idonly(&["suite", scenarios().to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(code(&o), 0, "{stdout}");
    assert!(stdout.contains("XFAIL  rb_too_few_nodes.json"), "{stdout}");
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), fs::read_dir(scenarios()).unwrap().count());
}

#[test]
fn empty_suite_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&idonly(&["suite", dir.path().to_str().unwrap()])), 2);
}

#[test]
fn explore_small_system() {
    let o = idonly(&["explore", "--n", "4", "--f", "1", "--horizon", "4"]);
    assert_eq!(code(&o), 0);
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["violating_branches"], 0);
}

#[test]
fn explore_negative_control() {
    let args = ["explore", "--n", "3", "--f", "1", "--horizon", "4"];
    assert_eq!(code(&idonly(&args)), 1);
    let mut expect = args.to_vec();
    expect.push("--expect-fail");
    assert_eq!(code(&idonly(&expect)), 0);
}

#[test]
fn explore_refuses_oversized_requests() {
    assert_eq!(code(&idonly(&["explore", "--horizon", "20"])), 3);
    assert_eq!(code(&idonly(&["explore", "--n", "4", "--f", "0"])), 2);
}

#[test]
fn partition_demo_reports_disagreement() {
    let o = idonly(&["demo", "partition"]);
    assert_eq!(code(&o), 0);
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["disagreement"], true);
    let o = idonly(&["demo", "partition", "--delay", "1"]);
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["disagreement"], false);
}
