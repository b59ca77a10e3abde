//! End-to-end runs of the `gridfreq` binary.

use std::path::PathBuf;
use std::process::{Command, Output};

fn data(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../data")
        .join(name)
        .display()
        .to_string()
}

fn gridfreq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gridfreq"))
        .args(args)
        .env_remove("GRIDFREQ_WORKERS")
        .output()
        .unwrap()
}

fn json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn gpf_of_the_base_case_is_balanced() {
    let out = gridfreq(&["gpf", "--case", &data("case30.m")]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let v = json(&out);
    assert_eq!(v["converged"], true);
    assert!(v["df_hz"].as_f64().unwrap().abs() < 1e-9);
    assert!(v["n_inf_pu"].as_f64().unwrap() < 1e-8);
}

#[test]
fn pf_reports_the_voltage_profile() {
    let out = gridfreq(&["pf", "--case", &data("case30.m")]);
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    assert_eq!(v["vm_pu"].as_array().unwrap().len(), 30);
    assert!(v["residual_pu"].as_f64().unwrap() < 1e-6);
}

#[test]
fn study_csv_has_a_row_per_unit() {
    let out = gridfreq(&[
        "study",
        "--case",
        &data("case30.m"),
        "--fmin",
        "-0.3",
        "--fmax",
        "0.3",
        "--format",
        "csv",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with("gen_id,bus,mw_lost"));
    assert_eq!(lines.len(), 1 + 6);
    assert!(lines[1..].iter().any(|l| l.contains(",stable,")));
    assert!(lines[1..]
        .iter()
        .any(|l| l.contains(",unstable-recovered,")));
}

#[test]
fn diagnose_writes_report_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = gridfreq(&[
        "diagnose",
        "--case",
        &data("case30.m"),
        "--trip-largest",
        "--fmin",
        "-0.3",
        "--fmax",
        "0.3",
        "--format",
        "json,csv",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for f in [
        "case30.json",
        "case30.csv",
        "case30_df_baseline.csv",
        "case30_df_bounded.csv",
    ] {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("case30.json")).unwrap())
            .unwrap();
    let row = &v["rows"][0];
    assert_eq!(row["verdict"], "unstable-recovered");
    assert!((row["df_bounded_hz"].as_f64().unwrap() + 0.3).abs() < 1e-6);
    assert!(!row["support"].as_array().unwrap().is_empty());
    assert_eq!(v["meta"]["bounds_hz"], serde_json::json!([-0.3, 0.3]));
}

#[test]
fn load_step_diagnosis() {
    let out = gridfreq(&[
        "diagnose",
        "--case",
        &data("case30.m"),
        "--load-step",
        "8:10",
        "--fmin",
        "-0.3",
        "--fmax",
        "0.3",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let row = &json(&out)["rows"][0];
    assert_eq!(row["verdict"], "stable");
    assert_eq!(row["gen_id"], serde_json::Value::Null);
    assert_eq!(row["bus"], 8);
}

#[test]
fn nonconvergence_exits_with_two() {
    let out = gridfreq(&[
        "diagnose",
        "--case",
        &data("case30.m"),
        "--outage",
        "2",
        "--fmin",
        "-0.3",
        "--fmax",
        "0.3",
        "--max-iters",
        "8",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(json(&out)["rows"][0]["verdict"], "nonconverged");
}

#[test]
fn input_errors_exit_with_one() {
    let missing = gridfreq(&["gpf", "--case", "no/such/case.m"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("does not exist"));

    let case = data("case30.m");
    for args in [
        vec!["diagnose", "--case", case.as_str()],
        vec!["gpf", "--case", case.as_str(), "--format", "xml"],
        vec!["study", "--case", case.as_str(), "--fmin", "0.1"],
        vec!["gpf", "--case", case.as_str(), "--outage", "99"],
    ] {
        let out = gridfreq(&args);
        assert_eq!(out.status.code(), Some(1), "{args:?}");
    }
}
