use std::path::Path;
use std::process::Command;

use serde_json::Value;

fn nullity_lab(args: &[&str], dir: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_nullity-lab"))
        .args(args)
        .current_dir(dir)
        .env("NULLITY_LAB_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn report(path: &Path) -> Value {
    let mut v: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    v["timestamp"] = Value::from(0);
    v
}

const CYLINDER: &str = r#"
manifold = "cylinder"
seed = 4

[analyze]
grid = 9

[connect]
p = [0.0, 0.0]
q = [0.0, 1.0]
cc = false

[connect.solver]
restarts = 4
"#;

#[test]
fn repeated_runs_write_identical_reports() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cyl.toml"), CYLINDER).unwrap();
    let a = nullity_lab(&["analyze", "--config", "cyl.toml", "--out", "a"], dir.path());
    let b = nullity_lab(&["analyze", "--config", "cyl.toml", "--out", "b"], dir.path());
    assert_eq!(a.status.code(), Some(0), "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(b.status.code(), Some(0));
    let ra = report(&dir.path().join("a/analyze.json"));
    let rb = report(&dir.path().join("b/analyze.json"));
    assert_eq!(ra, rb);
    assert_eq!(ra["config"]["manifold"], "cylinder");
    assert_eq!(ra["results"]["distinct_mu"], serde_json::json!([1]));
    let csv_a = std::fs::read(dir.path().join("a/index_scan.csv")).unwrap();
    let csv_b = std::fs::read(dir.path().join("b/index_scan.csv")).unwrap();
    assert_eq!(csv_a, csv_b);
}

#[test]
fn seed_flag_overrides_the_config() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cyl.toml"), CYLINDER).unwrap();
    let out = nullity_lab(&["analyze", "--config", "cyl.toml", "--seed", "17", "--out", "o"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let r = report(&dir.path().join("o/analyze.json"));
    assert_eq!(r["config"]["seed"], 17);
    assert_eq!(r["config"]["connect"]["solver"]["seed"], 17);
}

#[test]
fn failed_connection_has_its_own_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cyl.toml"), CYLINDER).unwrap();
    let out = nullity_lab(&["connect", "--config", "cyl.toml", "--out", "o"], dir.path());
    assert_eq!(out.status.code(), Some(3));
    let r = report(&dir.path().join("o/connect.json"));
    assert_eq!(r["results"]["status"], "failed");
}

#[test]
fn bad_configs_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "manifold = \"klein_bottle\"\n").unwrap();
    let out = nullity_lab(&["analyze", "--config", "bad.toml"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    std::fs::write(dir.path().join("bad.toml"), "manifold = [\n").unwrap();
    let out = nullity_lab(&["analyze", "--config", "bad.toml"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn user_immersion_files_resolve_relative_to_the_config() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("cfg")).unwrap();
    std::fs::write(
        dir.path().join("cfg/paraboloid_cylinder.toml"),
        r#"
name = "parabolic_cylinder"
space = "euclidean"
dim = 3
params = ["u", "v"]
lower = [-1.0, -1.0]
upper = [1.0, 1.0]
components = ["u", "v", "u*u"]
"#,
    )
    .unwrap();
    std::fs::write(
        dir.path().join("cfg/run.toml"),
        "manifold_file = \"paraboloid_cylinder.toml\"\n[analyze]\ngrid = 5\n",
    )
    .unwrap();
    let out = nullity_lab(&["analyze", "--config", "cfg/run.toml", "--out", "o"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let r = report(&dir.path().join("o/analyze.json"));
    assert_eq!(r["results"]["distinct_mu"], serde_json::json!([1]));
}
