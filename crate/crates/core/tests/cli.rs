use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use jumpkac::grid::Snapshot;

fn run(dir: &Path, sub: &str, config: &str) -> Output {
    let path = dir.join("run.toml");
    fs::write(&path, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_jumpkac"))
        .args([sub, "--config"])
        .arg(&path)
        .arg("--out")
        .arg(dir.join("out"))
        .env("JUMPKAC_THREADS", "2")
        .output()
        .unwrap()
}

fn error_json(out: &Output) -> serde_json::Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().rev().find(|l| l.starts_with('{')).expect("json record on stderr");
    serde_json::from_str(line).unwrap()
}

const SOLVE: &str = r#"
[problem]
preset = "jump-1d"
horizon = 0.125

[solver]
dt = 0.03125
intervals = [32]
M = 2
h = 0.05

[output]
snapshot_times = [0.0, 0.125]
formats = ["binary", "csv"]
"#;

#[test]
fn solve_writes_manifest_and_snapshots() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), "solve", SOLVE);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let base = dir.path().join("out");
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(base.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "solve");
    assert!(manifest["version"].as_str().unwrap().starts_with('v'));
    assert_eq!(manifest["resolved"]["steps"], 4);
    assert_eq!(manifest["artifacts"].as_array().unwrap().len(), 4);
    let snap = Snapshot::read_binary(fs::File::open(base.join("snapshot_t0.125000.jksnap")).unwrap()).unwrap();
    assert_eq!(snap.counts, vec![33]);
    assert_eq!(snap.values.len(), 33);
    assert_eq!((snap.lower[0], snap.upper[0]), (0.0, 1.0));
    let csv = fs::read_to_string(base.join("snapshot_t0.000000.csv")).unwrap();
    assert_eq!(csv.lines().count(), 34);
}

#[test]
fn unknown_key_is_a_config_error_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let config = SOLVE.replace("M = 2", "M = 2\nstep_size = 3");
    let out = run(dir.path(), "solve", &config);
    assert_eq!(out.status.code(), Some(2));
    let record = error_json(&out);
    assert_eq!(record["kind"], "config");
    assert_eq!(record["line"], 10);
    assert!(record["message"].as_str().unwrap().contains("step_size"));
    assert!(dir.path().join("out/error.json").exists());
}

#[test]
fn zero_horizon_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), "solve", &SOLVE.replace("horizon = 0.125", "horizon = 0.0"));
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["line"], 4);
}

#[test]
fn zero_paths_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = format!("{SOLVE}\n[mc]\nprobes = [[0.5]]\nn_paths = 0\n");
    let out = run(dir.path(), "mc-compare", &config);
    assert_eq!(out.status.code(), Some(2));
    let record = error_json(&out);
    assert_eq!(record["command"], "mc-compare");
    assert!(record["message"].as_str().unwrap().contains("n_paths"));
}

#[test]
fn converge_without_sweep_table_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), "converge", SOLVE);
    assert_eq!(out.status.code(), Some(2));
    assert!(error_json(&out)["message"].as_str().unwrap().contains("[sweep]"));
}

#[test]
fn converge_writes_table() {
    let dir = tempfile::tempdir().unwrap();
    let config = r#"
[problem]
preset = "jump-1d"

[solver]
M = 2

[sweep]
dt = [0.125, 0.0625, 0.03125]
c_x = 0.5
c_h = 0.25
"#;
    let out = run(dir.path(), "converge", config);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let table = fs::read_to_string(dir.path().join("out/convergence.csv")).unwrap();
    assert!(table.starts_with("dt,dx,h,M,L2_error,wall_time"));
    assert_eq!(table.lines().count(), 4);
    assert!(String::from_utf8_lossy(&out.stdout).contains("fitted rate"));
}
