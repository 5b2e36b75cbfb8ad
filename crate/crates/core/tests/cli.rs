use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mnlqr::experiments::{self, CertifyParams};
use mnlqr::model::{make_diffusion_network, matrix_serde, Gain};
use mnlqr::msops::{self, PolicyEvaluation, RiccatiOptions};
use mnlqr::{LqrmProblem, Mat};
use serde_json::Value;
use tempfile::TempDir;

fn mnlqr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mnlqr")).args(args).output().expect("binary runs")
}

fn report(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stderr)))
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_gain(dir: &Path, name: &str, k: &Mat) -> String {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string(&Gain::new(k.clone(), name)).unwrap()).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn solve_writes_riccati_report() {
    let tmp = TempDir::new().unwrap();
    let out = mnlqr(&["solve", "--preset", "suspension", "--out", path_str(tmp.path())]);
    assert_eq!(out.status.code(), Some(0));
    let rep = report(&out);
    assert!(rep["residual"].as_f64().unwrap() <= 1e-10);
    assert!(rep["rho"].as_f64().unwrap() < 1.0);
    assert!(tmp.path().join("solve.json").is_file());
}

#[test]
fn solve_accepts_problem_files() {
    let tmp = TempDir::new().unwrap();
    let path = tmp.path().join("p.json");
    fs::write(&path, make_diffusion_network().to_json().unwrap()).unwrap();
    let out = mnlqr(&["solve", "--problem", path_str(&path), "--out", path_str(tmp.path())]);
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn malformed_problem_reports_position() {
    let tmp = TempDir::new().unwrap();
    let path = tmp.path().join("bad.json");
    fs::write(&path, "{\n  \"A\": [[1.0, 2.0],\n  oops\n}").unwrap();
    let out = mnlqr(&["solve", "--problem", path_str(&path), "--out", path_str(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3") && err.contains("column"), "{err}");
}

#[test]
fn config_errors_are_listed_together_before_running() {
    let tmp = TempDir::new().unwrap();
    let out = mnlqr(&["optimize", "--preset", "nowhere", "--method", "sgd", "--out", path_str(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("nowhere") && err.contains("sgd"), "{err}");
    assert!(!tmp.path().join("summary.json").exists());
}

#[test]
fn unknown_flag_is_a_config_error() {
    assert_eq!(mnlqr(&["solve", "--bogus"]).status.code(), Some(2));
}

#[test]
fn eval_reports_stationarity_and_instability() {
    let tmp = TempDir::new().unwrap();
    let p = make_diffusion_network();
    let sol = msops::riccati_value_iteration(&p, RiccatiOptions::default()).unwrap();
    let out_dir = path_str(tmp.path()).to_string();
    let run = |gain: &str| report(&mnlqr(&["eval", "--preset", "diffusion", "--gain", gain, "--out", &out_dir]));

    let rep = run(&write_gain(tmp.path(), "kstar.json", &sol.k_star));
    assert!(rep["grad_norm"].as_f64().unwrap() <= 1e-6);

    let rep = run(&write_gain(tmp.path(), "zero.json", &p.zero_gain()));
    assert_eq!(rep["stable"], Value::Bool(true));

    let big = Mat::identity(p.m(), p.n()) * 5.0;
    let rep = run(&write_gain(tmp.path(), "big.json", &big));
    assert_eq!(rep["stable"], Value::Bool(false));
    assert!(rep["rho"].as_f64().unwrap() >= 1.0);
    assert_eq!(rep["cost"], Value::String("MS_UNSTABLE".into()));
}

#[test]
fn network_preset_writes_three_traces() {
    let tmp = TempDir::new().unwrap();
    let out = mnlqr(&["optimize", "--preset", "network-three-methods", "--out", path_str(tmp.path())]);
    assert_eq!(out.status.code(), Some(0));
    for tag in ["gd", "npg", "gn"] {
        let csv = fs::read_to_string(tmp.path().join(format!("trace_{tag}.csv"))).unwrap();
        assert_eq!(csv.lines().next(), Some("iteration,cost,grad_norm,eta,rho"));
        assert!(csv.lines().count() >= 2);
    }
    let rep = report(&out);
    assert_eq!(rep["runs"].as_array().unwrap().len(), 3);
    assert!(rep["environment"]["crate_version"].is_string());
}

#[test]
fn lost_stability_exits_with_numerical_failure() {
    let tmp = TempDir::new().unwrap();
    let out =
        mnlqr(&["optimize", "--preset", "diffusion", "--method", "gd", "--eta", "10", "--out", path_str(tmp.path())]);
    assert_eq!(out.status.code(), Some(3));
    let csv = fs::read_to_string(tmp.path().join("trace_gd.csv")).unwrap();
    assert!(csv.contains("MS_UNSTABLE"));
    assert!(!csv.contains("inf") && !csv.contains("NaN"));
}

#[test]
fn model_free_runs_are_byte_identical_across_modes() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let args = |dir: &TempDir, exec: &'static str| -> Vec<String> {
        [
            "optimize",
            "--preset",
            "diffusion",
            "--method",
            "gd-free",
            "--line-search",
            "--samples",
            "2000",
            "--horizon",
            "10",
            "--radius",
            "0.05",
            "--seed",
            "9",
            "--max-iter",
            "15",
            "--exec",
            exec,
            "--out",
        ]
        .iter()
        .map(|s| s.to_string())
        .chain([path_str(dir.path()).to_string()])
        .collect()
    };
    let run = |dir: &TempDir, exec| {
        let v = args(dir, exec);
        let out = mnlqr(&v.iter().map(String::as_str).collect::<Vec<_>>());
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        fs::read(dir.path().join("trace_gd_free.csv")).unwrap()
    };
    let first = run(&a, "parallel");
    assert_eq!(first, run(&b, "sequential"));
    assert_eq!(first, run(&b, "parallel"));
}

#[test]
fn config_file_values_are_overridden_by_flags() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("cfg.json");
    fs::write(
        &cfg,
        r#"{"preset": "gradient-estimation", "gradexp": {"sample_sizes": [200, 400, 800], "repeats": 2}, "seed": 3}"#,
    )
    .unwrap();
    let out_a = tmp.path().join("a");
    let out_b = tmp.path().join("b");
    let run = |out: &Path, seed: &str| {
        let o = mnlqr(&["gradexp", "--config", path_str(&cfg), "--seed", seed, "--out", path_str(out)]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        fs::read_to_string(out.join("gradexp.csv")).unwrap()
    };
    let a = run(&out_a, "4");
    assert_eq!(a.lines().next(), Some("n_sample,rel_err,noise_flag"));
    assert_eq!(a.lines().count(), 7);
    assert_eq!(a, run(&out_b, "4"));
    assert_ne!(a, run(&out_b, "5"));
    let rep: Value = serde_json::from_str(&fs::read_to_string(out_a.join("gradexp.json")).unwrap()).unwrap();
    assert_eq!(rep["config"]["seed"], 4);
}

#[test]
fn certify_passes_on_diffusion_and_is_vacuous_without_gains() {
    let tmp = TempDir::new().unwrap();
    let out = mnlqr(&["certify", "--preset", "diffusion", "--n-gains", "25", "--out", path_str(tmp.path())]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(report(&out)["passed"], Value::Bool(true));

    let out = mnlqr(&["certify", "--preset", "diffusion", "--n-gains", "0", "--out", path_str(tmp.path())]);
    assert_eq!(out.status.code(), Some(0));
    let rep = report(&out);
    assert_eq!(rep["n_gains"], 0);
    assert!(!rep["warnings"].as_array().unwrap().is_empty());
}

/// Evaluation with the gradient sign flipped.
fn tampered(problem: &LqrmProblem, k: &Mat) -> mnlqr::Result<PolicyEvaluation> {
    Ok(match msops::evaluate(problem, k)? {
        PolicyEvaluation::Stable(mut e) => {
            e.grad = -e.grad;
            e.ek = -e.ek;
            PolicyEvaluation::Stable(e)
        }
        other => other,
    })
}

#[test]
fn tampered_solver_is_caught() {
    let p = make_diffusion_network();
    let params = CertifyParams { n_gains: 10, margin: 1e-3 };
    let honest = experiments::certify(&p, &params, 1, msops::evaluate).unwrap();
    assert!(honest.passed(), "{:?}", honest.violations);
    let rep = experiments::certify(&p, &params, 1, tampered).unwrap();
    assert!(!rep.passed());
}

#[test]
fn gain_files_round_trip() {
    let k = Mat::from_row_slice(2, 3, &[1.0, -2.0, 0.5, 0.0, 3.25, -1e-3]);
    let json = serde_json::to_string(&Gain::new(k.clone(), "x")).unwrap();
    let back: Gain = serde_json::from_str(&json).unwrap();
    assert_eq!(back.k, k);
    assert_eq!(matrix_serde::to_rows(&k)[1], vec![0.0, 3.25, -1e-3]);
}
