mod common;

use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

fn icopt(args: &[&str]) -> (i32, Value, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_icopt")).args(args).output().unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    let report = serde_json::from_str(&stdout).unwrap_or(Value::Null);
    (out.status.code().unwrap(), report, String::from_utf8_lossy(&out.stderr).into_owned())
}

fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

#[test]
fn solve_writes_json_with_cost() {
    let dir = tempfile::tempdir().unwrap();
    let p = data("fredholm_lq.json");
    let (code, report, _) = icopt(&[
        "solve", "--problem", p.to_str().unwrap(), "--n", "65", "--rule", "trapezoid", "--out", "json",
        "--out-dir", dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    assert!(report["timings"]["total"].as_f64().is_some());
    let sol: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("solution.json")).unwrap()).unwrap();
    assert_eq!(sol["schema_version"], 1);
    assert!(sol["summary"]["cost"].as_f64().is_some());
    assert_eq!(sol["solution"]["control"].as_array().unwrap().len(), 65);
    assert!(!dir.path().join("solution.csv").exists());
}

#[test]
fn csv_output_lists_every_component() {
    let dir = tempfile::tempdir().unwrap();
    let p = data("volterra_lq_n2.json");
    let (code, _, _) = icopt(&[
        "solve", "--problem", p.to_str().unwrap(), "--n", "17", "--out", "csv", "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let csv = std::fs::read_to_string(dir.path().join("solution.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "node,t,u1,state1,state2,costate1,costate2");
    assert_eq!(lines.count(), 17);
    assert!(!dir.path().join("solution.json").exists());
}

#[test]
fn compare_paths_reports_agreement() {
    let dir = tempfile::tempdir().unwrap();
    let p = data("volterra_lq.json");
    let args = ["solve", "--problem", p.to_str().unwrap(), "--out-dir", dir.path().to_str().unwrap()];
    let (_, without, _) = icopt(&args);
    assert!(without["summary"]["path_agreement"].is_null());
    let mut with = args.to_vec();
    with.push("--compare-paths");
    let (code, report, _) = icopt(&with);
    assert_eq!(code, 0);
    assert!(report["summary"]["path_agreement"].as_f64().unwrap() < 1e-10);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let bad = write(dir.path(), "bad.json", r#"{"kind": "QuadForm", "domain": "#);
    assert_eq!(icopt(&["solve", "--problem", bad.to_str().unwrap(), "--out-dir", d]).0, 2);
    assert_eq!(icopt(&["solve", "--problem", "/nonexistent/p.json"]).0, 2);
    assert_eq!(icopt(&["solve"]).0, 2);

    let text = common::corpus("nonlinear.json").replace(r#""max_iter": 200"#, r#""max_iter": 2"#);
    let nc = write(dir.path(), "nc.json", &text);
    let (code, _, stderr) = icopt(&["solve", "--problem", nc.to_str().unwrap(), "--out-dir", d]);
    assert_eq!(code, 4, "{stderr}");
    assert!(stderr.contains("no convergence"));

    let (code, _, _) = icopt(&["solve", "--problem", nc.to_str().unwrap(), "--max-iter", "200", "--out-dir", d]);
    assert_eq!(code, 0);
}

#[test]
fn check_pd_examples() {
    let dir = tempfile::tempdir().unwrap();
    let id = write(
        dir.path(),
        "id.json",
        r#"{"kind":"QuadForm","domain":{"a":0,"b":1},"dims":{"n":1,"m":1},
            "kernels":{"K1":[["1"]],"K2":[["0"]],"r0":[["0"]]},"settings":{"grid_n":17}}"#,
    );
    let (code, r, _) = icopt(&["check-pd", "--problem", id.to_str().unwrap()]);
    assert_eq!(code, 0);
    for l in r["details"]["levels"].as_array().unwrap() {
        assert_eq!(l["verdict"], "PositiveDefinite");
        assert_eq!(l["min_eigenvalue"], 0.0);
    }
    assert_eq!(r["details"]["levels"][1]["grid_n"], 33);

    let (_, r, _) = icopt(&["check-pd", "--problem", data("quadform_indefinite.json").to_str().unwrap()]);
    assert_eq!(r["summary"]["verdict"], "Indefinite");
    assert_eq!(r["details"]["verdict_stable"], true);

    for f in ["quadform_scalar.json", "quadform_n2.json", "fredholm_lq.json", "fredholm_lq_n2.json"] {
        let (code, r, _) = icopt(&["check-pd", "--problem", data(f).to_str().unwrap(), "--no-timings"]);
        assert_eq!(code, 0);
        assert_eq!(r["details"]["verdict_stable"], true, "{f}");
        assert!(r.get("timings").is_none());
    }

    let (code, _, stderr) = icopt(&["check-pd", "--problem", data("volterra_lq.json").to_str().unwrap()]);
    assert_eq!(code, 3, "{stderr}");
}

#[test]
fn oracle_compare_reports_gaps() {
    for f in ["quadform_n2.json", "fredholm_lq_n2.json", "volterra_lq.json"] {
        let (code, r, _) = icopt(&["oracle-compare", "--problem", data(f).to_str().unwrap(), "--n", "33"]);
        assert_eq!(code, 0);
        let d = &r["details"];
        assert!(d["control_gap"].as_f64().unwrap() < 1e-8, "{f}: {d}");
        assert!(d["cost_gap"].as_f64().unwrap() < 1e-10, "{f}: {d}");
        assert!(d["fd_gradient_norm"].as_f64().unwrap() < 1e-6, "{f}: {d}");
    }
    let (code, r, _) = icopt(&["oracle-compare", "--problem", data("nonlinear.json").to_str().unwrap()]);
    assert_eq!(code, 0);
    assert!(r["details"]["control_gap"].is_null());
    // The solver state is exact only to the fixed-point tolerance (1e-11).
    assert!(r["details"]["cost_gap"].as_f64().unwrap() < 1e-10);
    assert!(r["details"]["fd_gradient_norm"].as_f64().unwrap() < 1e-7);
}

#[test]
fn convergence_command() {
    let p = data("fredholm_lq.json");
    let (code, r, _) = icopt(&["convergence", "--problem", p.to_str().unwrap(), "--no-timings"]);
    assert_eq!(code, 0);
    let d = &r["details"];
    assert_eq!(d["levels"].as_array().unwrap().len(), 5);
    assert!(d["cost_order"].as_f64().unwrap() >= 1.9);
    assert!(d["control_order"].as_f64().unwrap() >= 1.9);

    // Analytic kernels on Gauss grids sit at the roundoff floor by N = 65.
    let (_, r, _) = icopt(&["convergence", "--problem", p.to_str().unwrap(), "--rule", "gauss"]);
    for l in &r["details"]["levels"].as_array().unwrap()[2..4] {
        assert!(l["cost_error"].as_f64().unwrap() < 1e-13, "{l}");
        assert!(l["control_error"].as_f64().unwrap() < 1e-12, "{l}");
    }

    let (code, _, _) = icopt(&["convergence", "--problem", p.to_str().unwrap(), "--ladder", "17"]);
    assert_eq!(code, 2);
    let (code, _, _) = icopt(&["convergence", "--problem", p.to_str().unwrap(), "--ladder", "17,17"]);
    assert_eq!(code, 2);
}

#[test]
fn printed_k1_flag_adds_discrepancies() {
    let dir = tempfile::tempdir().unwrap();
    let p = data("volterra_lq_n2.json");
    let (code, r, _) = icopt(&[
        "solve", "--problem", p.to_str().unwrap(), "--use-printed-k1", "--n", "33", "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let names: Vec<&str> = r["discrepancies"].as_array().unwrap().iter().map(|d| d["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["k1_printed_vs_derived", "oracle_gap_printed_k1", "oracle_gap_derived_k1"]);
}
