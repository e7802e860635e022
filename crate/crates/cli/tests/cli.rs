use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use qef_cli::output::validate_document;
use serde_json::Value;

fn models() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../models")
}

fn model(name: &str) -> String {
    models().join(name).display().to_string()
}

fn qef(args: &[&str]) -> Output {
    qef_env(args, &[])
}

fn qef_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_qef"));
    cmd.args(args).env_remove("QEF_NUM_THREADS");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout.clone()).unwrap();
    validate_document(&text).expect("document matches its schema");
    serde_json::from_str(&text).unwrap()
}

fn stderr_error(out: &Output) -> Value {
    let v: Value = serde_json::from_slice(&out.stderr).expect("error document on stderr");
    v["error"].clone()
}

#[test]
fn rate_document() {
    let v = stdout_json(&qef(&["rate", "--model", &model("one_mode.json"), "--theta", "0.1"]));
    assert_eq!(v["command"], "rate");
    assert_eq!(v["method"], "frequency");
    assert!((v["upsilon"].as_f64().unwrap() - 0.1).abs() < 1e-10);
    assert!(v["margin"].as_f64().unwrap() > 0.0);
    assert_eq!(v["inputs_digest"].as_str().unwrap().len(), 64);
    assert!(v["diagnostics"]["est_quadrature_error"].as_f64().unwrap() >= 0.0);
}

#[test]
fn classical_rate_on_ou_model() {
    let out = qef(&["rate", "--model", &model("scalar_ou.json"), "--theta", "0.25", "--method", "classical"]);
    let v = stdout_json(&out);
    let exact = (1.0 - 0.5f64.sqrt()) / 2.0;
    assert!((v["upsilon"].as_f64().unwrap() - exact).abs() < 1e-9);
}

#[test]
fn rate_curve_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(
        &cfg,
        format!(
            r#"{{"command":"rate-curve","model_path":{:?},"theta_grid":{{"start":0.0,"stop":0.5,"points":11}}}}"#,
            model("coupled.json")
        ),
    )
    .unwrap();
    let json = dir.path().join("curve.json");
    let out = qef(&["rate-curve", "--config", cfg.to_str().unwrap(), "--out", json.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&json).unwrap();
    validate_document(&text).unwrap();
    let v: Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["rows"].as_array().unwrap().len(), 11);
    let csv = std::fs::read_to_string(json.with_extension("csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "theta,upsilon,method,est_error");
    assert_eq!(lines.len(), 12);
    // Υ is convex and increasing with Υ(0) = 0.
    let ups: Vec<f64> = lines[1..]
        .iter()
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(ups[0], 0.0);
    for w in ups.windows(3) {
        assert!(w[1] > w[0] && w[2] - 2.0 * w[1] + w[0] > -1e-9);
    }
}

#[test]
fn config_model_path_is_relative_to_config() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::copy(models().join("one_mode.json"), dir.path().join("m.json")).unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, r#"{"command":"rate","model_path":"m.json","theta":0.05}"#).unwrap();
    let v = stdout_json(&qef(&["rate", "--config", cfg.to_str().unwrap()]));
    assert!((v["upsilon"].as_f64().unwrap() - 0.05).abs() < 1e-10);
}

#[test]
fn non_symmetric_r_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(
        &bad,
        r#"{"mode":"oqho","theta":{"rows":2,"cols":2,"data":[0,1,-1,0]},
            "r_matrix":{"rows":2,"cols":2,"data":[1,0.5,0,1]},
            "m_matrix":{"rows":2,"cols":2,"data":[1,0,0,1]},
            "s_matrix":{"rows":2,"cols":2,"data":[1,0,0,1]}}"#,
    )
    .unwrap();
    let out = qef(&["validate", "--model", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(out.stdout.is_empty());
    let e = stderr_error(&out);
    assert_eq!(e["field"], "r_matrix");
    assert_eq!(e["exit_code"], 2);
}

#[test]
fn exit_codes() {
    assert_eq!(qef(&["bogus"]).status.code(), Some(2));
    assert_eq!(qef(&["rate", "--theta", "0.1"]).status.code(), Some(2));
    assert_eq!(qef(&["rate", "--no-such-flag"]).status.code(), Some(2));
    let out = qef(&["rate", "--model", &model("coupled.json"), "--theta", "2.0"]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(stderr_error(&out)["kind"], "NotAdmissible");
    assert_eq!(qef(&["--help"]).status.code(), Some(0));
}

#[test]
fn validate_reports_dimensions() {
    let v = stdout_json(&qef(&["validate", "--model", &model("coupled.json")]));
    assert_eq!(v["valid"], true);
    assert_eq!(v["nu"], 2);
    assert_eq!(v["n"], 2);
}

#[test]
fn horizon_writes_eigenpairs() {
    let dir = tempfile::tempdir().unwrap();
    let eig = dir.path().join("eig.csv");
    let out = qef(&[
        "horizon",
        "--model",
        &model("one_mode.json"),
        "--theta",
        "0.1",
        "--T",
        "2",
        "--N",
        "40",
        "--eigenpairs",
        eig.to_str().unwrap(),
    ]);
    let v = stdout_json(&out);
    let rows = v["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 1);
    assert!(rows[0]["rel_error"].as_f64().unwrap() < 1e-8);
    let csv = std::fs::read_to_string(&eig).unwrap();
    let header = csv.lines().next().unwrap();
    assert!(header.starts_with("k,omega,phi_0_0,phi_0_1"));
    // 2 components at 40 nodes give 40 positive frequencies.
    assert_eq!(csv.lines().count(), 41);
}

#[test]
fn output_is_deterministic_across_runs_and_thread_counts() {
    let m = model("one_mode.json");
    let args = [
        "montecarlo", "--model", &m, "--theta", "0.05", "--T", "1", "--N", "16", "--samples", "20000", "--seed", "3",
    ];
    let one = qef_env(&args, &[("QEF_NUM_THREADS", "1")]);
    let four = qef_env(&args, &[("QEF_NUM_THREADS", "4")]);
    let again = qef_env(&args, &[("QEF_NUM_THREADS", "4")]);
    assert!(one.status.success(), "{}", String::from_utf8_lossy(&one.stderr));
    assert_eq!(one.stdout, four.stdout);
    assert_eq!(four.stdout, again.stdout);
    let v = stdout_json(&one);
    let z = (v["value"].as_f64().unwrap() - v["closed_form"].as_f64().unwrap()).abs()
        / v["stderr"].as_f64().unwrap();
    assert!(z < 4.0, "{z}");
}

#[test]
fn bad_thread_count_is_rejected() {
    let out = qef_env(&["validate", "--model", &model("one_mode.json")], &[("QEF_NUM_THREADS", "zero")]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_error(&out)["field"], "QEF_NUM_THREADS");
}

#[test]
fn robust_commands() {
    let m = model("coupled.json");
    let t = stdout_json(&qef(&["tail", "--model", &m, "--alpha", "2"]));
    assert!(t["exponent"].as_f64().unwrap() > 0.0);
    assert_eq!(t["diagnostics"]["limit"], "admissibility");
    let w = stdout_json(&qef(&["worst-case", "--model", &model("one_mode.json"), "--epsilon", "0"]));
    assert!((w["bound"].as_f64().unwrap() - 2.0).abs() < 1e-9);
    assert_eq!(w["limit_at_zero"], true);
}

#[test]
fn appendix_check_small() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("a.json");
    std::fs::write(&cfg, r#"{"command":"appendix-check","omega":0.2,"n_trunc":24,"quad_order":24}"#).unwrap();
    let v = stdout_json(&qef(&["appendix-check", "--config", cfg.to_str().unwrap()]));
    assert!(v["max_block_error"].as_f64().unwrap() < 1e-3);
    assert!((v["sigma"].as_f64().unwrap() - (2.0 * 0.2f64.tanh()).sqrt()).abs() < 1e-15);
}

#[test]
fn digest_is_independent_of_output_location() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.json");
    let m = model("one_mode.json");
    let out = qef(&["rate", "--model", &m, "--theta", "0.1", "--out", a.to_str().unwrap()]);
    assert!(out.status.success());
    let to_file: Value = serde_json::from_str(&std::fs::read_to_string(Path::new(&a)).unwrap()).unwrap();
    let to_stdout = stdout_json(&qef(&["rate", "--model", &m, "--theta", "0.1"]));
    assert_eq!(to_file["inputs_digest"], to_stdout["inputs_digest"]);
    assert_eq!(to_file["upsilon"], to_stdout["upsilon"]);
}
