use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_byztwin"))
}

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join(format!("../../scenarios/{name}.toml"))
}

fn run(args: &[&str]) -> Output {
    let out = bin().args(args).env("RUST_LOG", "warn").output().expect("spawn byztwin");
    eprintln!("{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

#[test]
fn validate_exit_codes() {
    let ok = run(&["validate", scenario("basic").to_str().unwrap()]);
    assert_eq!(code(&ok), 0);

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    let text = std::fs::read_to_string(scenario("basic")).unwrap().replace("timeout = \"20ms\"", "timeout = \"0\"");
    std::fs::write(&bad, text).unwrap();
    assert_eq!(code(&run(&["validate", bad.to_str().unwrap()])), 1);
    assert_eq!(code(&run(&["validate", "/nonexistent.toml"])), 1);
}

#[test]
fn run_replay_report_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let r = dir.path().join("r");
    let rs = r.to_str().unwrap();
    let out = run(&["run", scenario("basic").to_str().unwrap(), "--seed", "9", "--out", rs]);
    assert_eq!(code(&out), 0);
    for f in ["scenario.toml", "run.json", "externals.json", "report.json", "store"] {
        assert!(r.join(f).exists(), "{f}");
    }
    let manifest: Value = serde_json::from_slice(&std::fs::read(r.join("run.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 9);

    let out = run(&["replay", rs]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("replay matches"));

    // The store alone rebuilds the same report.
    let rep = dir.path().join("rebuilt.json");
    assert_eq!(code(&run(&["report", rs, "--out", rep.to_str().unwrap()])), 0);
    let a: Value = serde_json::from_slice(&std::fs::read(&rep).unwrap()).unwrap();
    let b: Value = serde_json::from_slice(&std::fs::read(r.join("report.json")).unwrap()).unwrap();
    assert_eq!(a, b);

    // Reusing a run directory is refused.
    let again = run(&["run", scenario("basic").to_str().unwrap(), "--out", rs]);
    assert_eq!(code(&again), 1);

    // A tampered external log no longer reproduces the run.
    let ext_path = r.join("externals.json");
    let mut ext: Vec<Value> = serde_json::from_slice(&std::fs::read(&ext_path).unwrap()).unwrap();
    assert_eq!(ext.len(), 1);
    ext[0]["at"] = Value::String("1100ms".into());
    std::fs::write(&ext_path, serde_json::to_vec(&ext).unwrap()).unwrap();
    let out = run(&["replay", rs]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("replay diverged"));
}

#[test]
fn violation_exits_two_and_exports_siem() {
    let dir = tempfile::tempdir().unwrap();
    let r = dir.path().join("r");
    let rs = r.to_str().unwrap();
    let out = run(&["run", scenario("false_suspicion").to_str().unwrap(), "--out", rs]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stdout).contains("FalseSuspicionStorm"));

    let siem = dir.path().join("siem.ndjson");
    assert_eq!(code(&run(&["export-siem", rs, "--out", siem.to_str().unwrap()])), 0);
    let text = std::fs::read_to_string(&siem).unwrap();
    let lines: Vec<Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let report: Value = serde_json::from_slice(&std::fs::read(r.join("report.json")).unwrap()).unwrap();
    assert_eq!(lines.len() as u64, report["metrics"]["false_suspicions"].as_u64().unwrap());
    let offsets: Vec<u64> = lines.iter().map(|l| l["offset"].as_u64().unwrap()).collect();
    assert_eq!(offsets, (0..lines.len() as u64).collect::<Vec<_>>());

    let part = run(&["export-siem", rs, "--from", "2", "--to", "4"]);
    assert_eq!(String::from_utf8_lossy(&part.stdout).lines().count(), 2);
}

#[test]
fn auto_confirm_flag_applies_deferred_advisory() {
    let dir = tempfile::tempdir().unwrap();
    let r = dir.path().join("r");
    let out = run(&["run", scenario("state_lie").to_str().unwrap(), "--auto-confirm", "--out", r.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    let report: Value = serde_json::from_slice(&std::fs::read(r.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["auto_confirm"], true);
    assert_eq!(report["decisions"][0]["confirmation"]["approve"], true);
    assert_eq!(code(&run(&["replay", r.to_str().unwrap()])), 0);
}

#[test]
fn sweep_writes_map() {
    let dir = tempfile::tempdir().unwrap();
    let faults = dir.path().join("faults.json");
    std::fs::write(
        &faults,
        r#"[{"id": 60, "kind": "delay", "delay": "1ms", "match": {"kinds": ["pre_prepare"]}, "window": {"start": "0"}}]"#,
    )
    .unwrap();
    let map = dir.path().join("map.json");
    let out = run(&[
        "sweep",
        scenario("basic").to_str().unwrap(),
        "--at",
        "800ms",
        "--horizon",
        "300ms",
        "--axis",
        "leader_delay=2ms,30ms",
        "--axis",
        "timeout=20ms,40ms",
        "--faults",
        faults.to_str().unwrap(),
        "--out",
        map.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    let v: Value = serde_json::from_slice(&std::fs::read(&map).unwrap()).unwrap();
    let cells = v["cells"].as_array().unwrap();
    assert_eq!(cells.len(), 4);
    // 30ms of leader delay outlasts a 20ms timeout but not a 40ms one.
    let outcome = |i: usize| cells[i]["outcome"].as_str().unwrap().to_string();
    assert_eq!(outcome(0), "safe_live");
    assert_ne!(outcome(2), "safe_live");
    assert_eq!(outcome(3), "safe_live");

    let bad = run(&["sweep", scenario("basic").to_str().unwrap(), "--at", "1s", "--horizon", "1s", "--axis", "nope=1"]);
    assert_eq!(code(&bad), 1);
}
