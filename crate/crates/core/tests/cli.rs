use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const EXAMPLE: &str = concat!(
    env!("CARGO_MANIFEST_DIR"),
    "/examples/double_integrator.json"
);

fn example() -> Value {
    serde_json::from_str(&std::fs::read_to_string(EXAMPLE).unwrap()).unwrap()
}

/// The bundled example on an 8-step horizon with a looser terminal bound,
/// small enough to solve in well under a second.
fn short_example() -> Value {
    let mut v = example();
    v["horizon"] = 8.into();
    let bound = v["terminal"]["cov_bound"].as_array_mut().unwrap();
    for (i, row) in bound.iter_mut().enumerate() {
        let x = row[i].as_f64().unwrap();
        row[i] = (4.0 * x).into();
    }
    v
}

fn write_config(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(v).unwrap()).unwrap();
    path
}

fn covsteer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_covsteer"))
        .args(args)
        .env("COVSTEER_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn solve(config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "solve",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    covsteer(&args)
}

#[test]
fn check_accepts_bundled_example() {
    let out = covsteer(&["check", EXAMPLE]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(String::from_utf8_lossy(&out.stdout).contains("precheck passed"));
}

#[test]
fn check_rejects_singular_measurement_noise() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = example();
    v["observation"]["D"][1][1] = 0.0.into();
    let path = write_config(dir.path(), "singular.json", &v);
    let out = covsteer(&["check", path.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("validation failed"));
}

#[test]
fn check_rejects_risk_of_one_half_or_more() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = example();
    v["constraints"][0]["risk"] = 0.6.into();
    v["risk"]["total"] = 0.6005.into();
    let path = write_config(dir.path(), "risky.json", &v);
    assert_eq!(code(&covsteer(&["check", path.to_str().unwrap()])), 2);
}

#[test]
fn check_fails_on_unreadable_config() {
    let out = covsteer(&["check", "/nonexistent/config.json"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("cannot read"));
}

#[test]
fn solve_reports_precheck_infeasibility() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = example();
    let bound = v["terminal"]["cov_bound"].as_array_mut().unwrap();
    for (i, row) in bound.iter_mut().enumerate() {
        row[i] = 1e-6.into();
    }
    let path = write_config(dir.path(), "tight.json", &v);
    assert_eq!(code(&covsteer(&["check", path.to_str().unwrap()])), 2);
    let out = solve(&path, &dir.path().join("out"), &[]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("infeasible"));
    assert!(!dir.path().join("out").join("policy.json").exists());
}

#[test]
fn solve_rejects_out_of_range_ellipse_coordinates() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), "short.json", &short_example());
    let out = solve(&path, &dir.path().join("out"), &["--ellipse-coords", "0,4"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn solve_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), "short.json", &short_example());
    let out_dir = dir.path().join("out");
    let out = solve(&path, &out_dir, &["--export-conic"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for name in [
        "policy.json",
        "audit.csv",
        "mean.csv",
        "ellipses.csv",
        "schedule.csv",
        "program.txt",
        "solve-manifest.json",
    ] {
        assert!(out_dir.join(name).is_file(), "missing {name}");
    }
    let policy = read_json(&out_dir.join("policy.json"));
    let hash = policy["config_sha256"].as_str().unwrap();
    let manifest = read_json(&out_dir.join("solve-manifest.json"));
    assert_eq!(manifest["config_sha256"].as_str().unwrap(), hash);
    assert_eq!(policy["horizon"].as_u64(), Some(8));
    // Header plus one row per step.
    let mean = std::fs::read_to_string(out_dir.join("mean.csv")).unwrap();
    assert_eq!(mean.lines().count(), 10);
}

#[test]
fn banded_policy_costs_at_least_the_full_policy() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), "short.json", &short_example());
    let objective = |extra: &[&str], sub: &str| {
        let out_dir = dir.path().join(sub);
        let out = solve(&path, &out_dir, extra);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        read_json(&out_dir.join("policy.json"))["objective"]
            .as_f64()
            .unwrap()
    };
    let full = objective(&[], "full");
    let band0 = objective(&["--bandwidth", "0"], "band0");
    let band2 = objective(&["--bandwidth", "2"], "band2");
    let tol = 1e-6 * full.abs().max(1.0);
    assert!(band0 >= full - tol, "bandwidth 0: {band0} < {full}");
    assert!(band2 >= full - tol, "bandwidth 2: {band2} < {full}");
    assert!(
        band0 >= band2 - tol,
        "bandwidth 0: {band0} < bandwidth 2: {band2}"
    );
}

#[test]
fn simulate_rejects_policy_for_another_config() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), "short.json", &short_example());
    let out_dir = dir.path().join("out");
    assert_eq!(code(&solve(&path, &out_dir, &[])), 0);
    // Same problem, different bytes.
    let text = std::fs::read_to_string(&path).unwrap();
    let edited = dir.path().join("edited.json");
    std::fs::write(&edited, format!("{text}\n")).unwrap();
    let policy = out_dir.join("policy.json");
    let out = covsteer(&[
        "simulate",
        edited.to_str().unwrap(),
        policy.to_str().unwrap(),
        "--runs",
        "10",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 5);
    assert!(stderr(&out).contains("hashes to"));
}

#[test]
fn single_run_rates_are_binary() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), "short.json", &short_example());
    let out_dir = dir.path().join("out");
    assert_eq!(code(&solve(&path, &out_dir, &[])), 0);
    let policy = out_dir.join("policy.json");
    let out = covsteer(&[
        "simulate",
        path.to_str().unwrap(),
        policy.to_str().unwrap(),
        "--runs",
        "1",
        "--trajectories",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report = read_json(&out_dir.join("report.json"));
    assert_eq!(report["runs"].as_u64(), Some(1));
    for step in report["steps"].as_array().unwrap() {
        let rate = step["rate"].as_f64().unwrap();
        assert!(rate == 0.0 || rate == 1.0, "rate {rate}");
    }
    // Header plus states 0..=N of the single run.
    let traj = std::fs::read_to_string(out_dir.join("trajectories.csv")).unwrap();
    assert_eq!(traj.lines().count(), 10);
    assert!(out_dir.join("simulate-manifest.json").is_file());
}

#[test]
fn zero_runs_is_a_usage_error() {
    let out = covsteer(&["simulate", EXAMPLE, "policy.json", "--runs", "0"]);
    assert_eq!(code(&out), 2);
}
