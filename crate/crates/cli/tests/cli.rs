use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn nosetori(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nosetori"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

#[test]
fn verify_passes_and_writes_discrepancies() {
    let dir = tempfile::tempdir().unwrap();
    let o = nosetori(dir.path(), &["verify", "--no-timestamp"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let out = stdout(&o);
    assert!(out.lines().filter(|l| l.starts_with("FAIL")).count() == 0);
    assert!(out.ends_with("0 failed\n"));
    let md = std::fs::read_to_string(dir.path().join("DISCREPANCIES.md")).unwrap();
    assert!(md.contains("1/64"));
    assert!(!md.starts_with("# generated"));
}

#[test]
fn corrupted_fixture_fails_with_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let golden: serde_json::Map<String, Value> =
        serde_json::from_str(include_str!("../fixtures/golden.json")).unwrap();
    let mut bad = golden.clone();
    bad.insert("nose.nu.x^3*U".into(), Value::String("56/145".into()));
    let path = dir.path().join("bad.json");
    std::fs::write(&path, serde_json::to_string(&bad).unwrap()).unwrap();
    let o = nosetori(
        dir.path(),
        &["verify", "--no-timestamp", "--filter", "nose", "--fixtures", "bad.json"],
    );
    assert_eq!(o.status.code(), Some(1));
    let out = stdout(&o);
    let fails: Vec<&str> = out.lines().filter(|l| l.starts_with("FAIL")).collect();
    assert_eq!(fails.len(), 1, "{out}");
    assert!(fails[0].starts_with("FAIL nose.nu.x^3*U: expected 56/145, computed 55/144"));
}

#[test]
fn missing_golden_key_is_a_failure_not_a_crash() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("empty.json"), "{}").unwrap();
    let o = nosetori(dir.path(), &["verify", "--filter", "hessian", "--fixtures", "empty.json"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL hessian.series"));
}

#[test]
fn filter_runs_one_group() {
    let dir = tempfile::tempdir().unwrap();
    let o = nosetori(dir.path(), &["verify", "--no-timestamp", "--filter", "nose-like"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    let ids: Vec<&str> = out
        .lines()
        .filter_map(|l| l.strip_prefix("PASS "))
        .collect();
    assert!(!ids.is_empty());
    assert!(ids.iter().all(|id| id.starts_with("nose-like.")), "{out}");
    // no oscillator group, no discrepancy file
    assert!(!dir.path().join("DISCREPANCIES.md").exists());
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        vec!["verify", "--filter", "nope"],
        vec!["simulate", "--model", "nope"],
        vec!["simulate", "--dt", "0.1", "--tol", "1e-6"],
        vec!["simulate", "--beta", "-1"],
        vec!["simulate", "--ic", "1,2"],
        vec!["simulate", "--ic", "0,1,1,0", "--radius", "0.1"],
        vec!["normal-form", "--model", "nose-like", "--a", "1"],
        vec!["normal-form", "--model", "hat-g", "--kappa", "x"],
        vec!["ergodicity", "--radii", "2"],
        vec!["poincare", "--section", "sideways"],
        vec!["simulate", "--config", "missing.json"],
    ] {
        let o = nosetori(dir.path(), &args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
    }
}

#[test]
fn runtime_errors_exit_three_with_json() {
    let dir = tempfile::tempdir().unwrap();
    let o = nosetori(dir.path(), &["poincare", "--ic", "0,1,1,0", "--t-max", "1", "--n-points", "10"]);
    assert_eq!(o.status.code(), Some(3));
    let err: Value = serde_json::from_str(stderr(&o).trim()).unwrap();
    assert_eq!(err["kind"], "runtime");
    assert!(err["error"].as_str().unwrap().contains("crossings"));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = serde_json::json!({
        "subcommand": "simulate",
        "model": { "kind": "rescaled_F_beta", "beta": 0.01, "potential": { "cos": [1.0] } },
        "method": { "method": "implicit_midpoint", "dt": 0.05 },
        "ic": { "near_xi1": { "radius": 0.1, "angle": 0.0 } },
        "t_end": 1.0,
        "every": 1
    });
    std::fs::write(dir.path().join("run.json"), cfg.to_string()).unwrap();
    let o = nosetori(dir.path(), &["--no-timestamp", "--config", "run.json", "simulate"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let lines: Vec<String> = stdout(&o).lines().map(String::from).collect();
    assert_eq!(lines[0], "t,w,sigma,W,Sigma,energy");
    assert_eq!(lines.len(), 1 + 21);
    assert!(lines[1].starts_with("0,0,1.1,1,0,"));
    // flags win
    let o = nosetori(
        dir.path(),
        &["--no-timestamp", "--config", "run.json", "simulate", "--dt", "0.25", "--radius", "0.2"],
    );
    let lines: Vec<String> = stdout(&o).lines().map(String::from).collect();
    assert_eq!(lines.len(), 1 + 5);
    assert!(lines[1].starts_with("0,0,1.2,"));
    // a config for another subcommand is rejected
    let o = nosetori(dir.path(), &["--config", "run.json", "poincare"]);
    assert_eq!(o.status.code(), Some(2));
    // unknown fields are rejected
    std::fs::write(dir.path().join("typo.json"), r#"{"t_ned": 3}"#).unwrap();
    let o = nosetori(dir.path(), &["--config", "typo.json", "simulate"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn timestamps_are_optional() {
    let dir = tempfile::tempdir().unwrap();
    let o = nosetori(dir.path(), &["simulate", "--t-end", "0.1"]);
    assert!(stdout(&o).starts_with("# generated unix="));
    let o = nosetori(dir.path(), &["normal-form"]);
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(v["generated_unix"].is_u64());
    let o = nosetori(dir.path(), &["--no-timestamp", "normal-form"]);
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(v.get("generated_unix").is_none());
}

#[test]
fn normal_form_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let o = nosetori(dir.path(), &["--no-timestamp", "normal-form", "--model", "nose"]);
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["alpha"], "-11/24");
    assert_eq!(v["beta"], "1");
    assert_eq!(v["kam_sufficient"], true);
    assert_eq!(v["nu"].as_array().unwrap().len(), 10);
    assert_eq!(v["hessian"][0]["coefficient"], "-1/12");
    assert_eq!(v["equations"].as_array().unwrap().len(), 2);

    let o = nosetori(dir.path(), &["--no-timestamp", "normal-form", "--model", "nose-like", "--a", "2", "--b", "10/3"]);
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["alpha"], "0");
    assert_eq!(v["gamma"], "1/3");

    let o = nosetori(dir.path(), &["--no-timestamp", "normal-form", "--model", "hat-g", "--kappa", "1/10"]);
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["alpha"], "-13/240");
    assert_eq!(v["gamma"], "-5");
    assert_eq!(v["full_coupling"]["beta"], "-799/798");
}

#[test]
fn average_ho_output() {
    let dir = tempfile::tempdir().unwrap();
    let o = nosetori(dir.path(), &["--no-timestamp", "average-ho", "--kappa", "1/10", "--out", "avg.json"]);
    assert_eq!(o.status.code(), Some(0));
    let v: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("avg.json")).unwrap()).unwrap();
    assert_eq!(v["bnf_coefficient_over_kappa"], "-13/24");
    assert_eq!(v["bnf_coefficient"], "-13/240");
    assert_eq!(v["critical_energy_at_kappa"], "799/8000");
    assert_eq!(v["discrepancies"].as_array().unwrap().len(), 4);
}

#[test]
fn rotation_reports_the_linearized_value() {
    let dir = tempfile::tempdir().unwrap();
    let o = nosetori(dir.path(), &["--no-timestamp", "rotation", "--n-points", "128", "--radius", "0.02"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    let lin = v["linearized_rotation"].as_f64().unwrap();
    assert!((lin - (2f64.sqrt() - 1.0)).abs() < 1e-6);
    let est = v["rotation"]["estimate"].as_f64().unwrap();
    assert!((est - lin).abs() < 1e-3, "{est}");
    assert_eq!(v["class"], "curve");
}

#[test]
fn ergodicity_small_grid() {
    let dir = tempfile::tempdir().unwrap();
    let o = nosetori(
        dir.path(),
        &[
            "--no-timestamp", "ergodicity", "--betas", "0,0.01", "--radii", "0.05", "--angles", "2", "--n-points",
            "64", "--out", "cells.csv", "--summary", "summary.json",
        ],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("cells.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4);
    let v: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    let per = v["per_beta"].as_array().unwrap();
    assert_eq!(per.len(), 2);
    assert!(per.iter().all(|b| b["cells"] == 2));
}
