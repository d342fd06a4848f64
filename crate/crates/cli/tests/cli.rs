use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use jmls_core::io::{read_dataset, write_dataset, write_model};
use jmls_core::model::random_model;
use jmls_core::{run_filter, simulate, InputLaw};

fn jmls(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jmls")).args(args).output().expect("binary runs")
}

fn repo(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn trace_logliks(dir: &Path) -> Vec<f64> {
    let text = std::fs::read_to_string(dir.join("trace.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("iter,loglik,dloglik,T_enabled,wall_ms"));
    lines.map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect()
}

fn report_value(dir: &Path, key: &str) -> f64 {
    let text = std::fs::read_to_string(dir.join("report.toml")).unwrap();
    let line = text.lines().find(|l| l.starts_with(&format!("{key} ="))).unwrap();
    line.split('=').nth(1).unwrap().trim().parse().unwrap()
}

#[test]
fn simulate_matches_golden_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sim.csv");
    let model = repo("docs/example1_model.json");
    let o = jmls(&["simulate", "--model", s(&model), "--steps", "10", "--seed", "42", "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let golden = std::fs::read(repo("crates/cli/tests/data/golden_seed42.csv")).unwrap();
    assert_eq!(std::fs::read(&out).unwrap(), golden);
}

#[test]
fn simulate_is_deterministic() {
    let model = repo("docs/example1_model.json");
    let args = ["simulate", "--model", s(&model), "--steps", "100", "--seed", "1"];
    let a = jmls(&args);
    let b = jmls(&args);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let text = String::from_utf8(a.stdout).unwrap();
    assert_eq!(text.lines().count(), 101);
    let c = jmls(&["--threads", "1", "simulate", "--model", s(&model), "--steps", "100", "--seed", "2"]);
    assert_ne!(c.stdout, text.as_bytes());
}

#[test]
fn missing_model_file_fails_with_diagnostic() {
    let o = jmls(&["simulate", "--model", "/nonexistent/model.json", "--steps", "5", "--seed", "1"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("/nonexistent/model.json"), "{err}");
}

#[test]
fn bad_config_is_exit_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "[em]\nmax_iterations = 3\n").unwrap();
    let o = jmls(&["identify", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("max_iterations"));
    let o = jmls(&["loglik", "--model", s(&repo("docs/example1_model.json")), "--data", "x.csv", "--budget", "0"]);
    assert_eq!(o.status.code(), Some(2));
}

fn example_data(dir: &Path, steps: usize, seed: u64) -> PathBuf {
    let data = dir.join("data.csv");
    let o = jmls(&[
        "simulate",
        "--model",
        s(&repo("docs/example1_model.json")),
        "--steps",
        &steps.to_string(),
        "--seed",
        &seed.to_string(),
        "--out",
        s(&data),
    ]);
    assert!(o.status.success());
    data
}

#[test]
fn identify_improves_on_initial_guess() {
    let dir = tempfile::tempdir().unwrap();
    let data = example_data(dir.path(), 300, 3);
    let out = dir.path().join("out");
    let o = jmls(&[
        "identify",
        "--config",
        s(&repo("docs/example1.toml")),
        "--data",
        s(&data),
        "--out-dir",
        s(&out),
        "--max-iter",
        "15",
        "--moments",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let trace = trace_logliks(&out);
    assert_eq!(trace.len(), 15);
    assert!(report_value(&out, "final_loglik") > report_value(&out, "initial_loglik"));
    assert_eq!(report_value(&out, "initial_loglik"), trace[0]);
    assert!(out.join("model.json").exists() && out.join("moments.csv").exists());

    let bode = dir.path().join("bode.csv");
    let o = jmls(&[
        "bode",
        "--model",
        s(&out.join("model.json")),
        "--reference",
        s(&repo("docs/example1_model.json")),
        "--points",
        "50",
        "--out",
        s(&bode),
    ]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.starts_with("mapping = ["), "{text}");
    assert_eq!(std::fs::read_to_string(&bode).unwrap().lines().count(), 1 + 50 * 3);
}

#[test]
fn frozen_identify_keeps_loglik_constant() {
    let dir = tempfile::tempdir().unwrap();
    let data = example_data(dir.path(), 100, 4);
    let out = dir.path().join("out");
    let o = jmls(&[
        "identify",
        "--model",
        s(&repo("docs/example1_init.json")),
        "--data",
        s(&data),
        "--out-dir",
        s(&out),
        "--max-iter",
        "4",
        "--freeze",
        "gamma,pi,transition,prior",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let trace = trace_logliks(&out);
    assert!(!trace.is_empty());
    assert!(trace.iter().all(|&l| (l - trace[0]).abs() <= 1e-10));
}

#[test]
fn single_mode_identify_is_monotone() {
    let dir = tempfile::tempdir().unwrap();
    let truth = random_model(2, 1, 1, 1, 21);
    let start = random_model(2, 1, 1, 1, 22);
    let data = simulate(&truth, &InputLaw::StandardNormal, 150, 23).unwrap();
    write_model(&dir.path().join("start.json"), &start).unwrap();
    write_dataset(&dir.path().join("data.csv"), &data).unwrap();
    let out = dir.path().join("out");
    let o = jmls(&[
        "identify",
        "--model",
        s(&dir.path().join("start.json")),
        "--data",
        s(&dir.path().join("data.csv")),
        "--out-dir",
        s(&out),
        "--max-iter",
        "30",
        "--tol",
        "1e-12",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let trace = trace_logliks(&out);
    assert!(trace.len() > 1);
    assert!(trace.windows(2).all(|w| w[1] >= w[0] - 1e-9), "{trace:?}");
}

#[test]
fn loglik_reports_filter_value_and_breakdown() {
    let dir = tempfile::tempdir().unwrap();
    let data = example_data(dir.path(), 50, 5);
    let steps = dir.path().join("steps.csv");
    let model = repo("docs/example1_model.json");
    let o = jmls(&["loglik", "--model", s(&model), "--data", s(&data), "--budget", "3", "--out", s(&steps)]);
    assert!(o.status.success());
    let printed: f64 = String::from_utf8(o.stdout).unwrap().trim().parse().unwrap();
    let expected = run_filter(&jmls_core::io::read_model(&model).unwrap(), &read_dataset(&data).unwrap(), 3).unwrap().log_likelihood;
    assert_eq!(printed, expected);
    let text = std::fs::read_to_string(&steps).unwrap();
    let last: f64 = text.lines().last().unwrap().split(',').nth(2).unwrap().parse().unwrap();
    assert!((last - expected).abs() < 1e-9 * expected.abs().max(1.0));
    assert_eq!(text.lines().count(), 51);
}

#[test]
fn identical_models_match_with_zero_error() {
    let model = repo("docs/example1_model.json");
    let o = jmls(&["bode", "--model", s(&model), "--reference", s(&model)]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("mapping = [1, 2, 3]"), "{text}");
    assert!(text.contains("total_error = 0.0000000000000000e0"), "{text}");
}

#[test]
fn numerical_failure_is_exit_code_three() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("bad.csv");
    std::fs::write(&data, "k,u1,y1\n1,0.1,0.2\n2,0.3,1e300\n3,0.1,0.1\n").unwrap();
    let o = jmls(&["loglik", "--model", s(&repo("docs/example1_model.json")), "--data", s(&data)]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}
