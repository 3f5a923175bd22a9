use std::path::PathBuf;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sdedge"))
}

fn scenarios() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn validate_bundled_scenario() {
    let o = bin()
        .arg("validate")
        .arg(scenarios().join("fig6.scenario"))
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("3 APs"));
}

#[test]
fn validate_reports_every_error_with_lines() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.scenario");
    std::fs::write(
        &p,
        "[topology]\ncontroller C1 id=1\nswitch S1 controller=C1\nap AP1 x=0 y=0 radius=10 capacity=5 controller=C9\n[groups]\ngroup G AP1 AP9\n",
    )
    .unwrap();
    let o = bin().arg("validate").arg(&p).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("line 4"), "{err}");
    assert!(err.contains("line 6"), "{err}");
    assert!(err.contains("AP9"), "{err}");
}

#[test]
fn unknown_override_is_a_usage_error() {
    let o = bin()
        .arg("run")
        .arg(scenarios().join("fig2.scenario"))
        .args(["--set", "no_such_key=1"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no_such_key"));
}

#[test]
fn run_writes_csv_and_trace() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m.csv");
    let trace = dir.path().join("t.jsonl");
    let o = bin()
        .arg("run")
        .arg(scenarios().join("fig6.scenario"))
        .args(["--seed", "4", "--set", "mode=none"])
        .arg("--out")
        .arg(&out)
        .arg("--trace")
        .arg(&trace)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(&out).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("#schema_version=1"));
    assert_eq!(lines.next(), Some("t,stream_id,mbps"));
    assert!(lines.count() > 300);
    let t = std::fs::read_to_string(&trace).unwrap();
    let first: serde_json::Value = serde_json::from_str(t.lines().next().unwrap()).unwrap();
    assert!(first.get("t").is_some());
    assert!(stdout(&o).contains("seed 4"));
}

#[test]
fn run_json_is_byte_identical_across_invocations() {
    let run = || {
        bin()
            .arg("run")
            .arg(scenarios().join("fig2.scenario"))
            .args(["--format", "json"])
            .output()
            .unwrap()
    };
    let (a, b) = (run(), run());
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let v: serde_json::Value = serde_json::from_slice(&a.stdout).unwrap();
    assert_eq!(v["schema_version"], 1);
}

#[test]
fn batch_runs_directory() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["fig2.scenario", "fig6.scenario"] {
        std::fs::copy(scenarios().join(name), dir.path().join(name)).unwrap();
    }
    let out = dir.path().join("out");
    let o = bin()
        .arg("batch")
        .arg(dir.path())
        .arg("--out-dir")
        .arg(&out)
        .args(["--format", "json"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("fig2.json").exists());
    assert!(out.join("fig6.json").exists());
    assert_eq!(stdout(&o).matches(": ok").count(), 2);
}

#[test]
fn missing_file_fails() {
    let o = bin().arg("run").arg("/nonexistent/x.scenario").output().unwrap();
    assert_eq!(o.status.code(), Some(1));
}
