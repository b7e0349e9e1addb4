use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn stlnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stlnet")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn source(name: &str) -> &'static str {
    stlnet::scenario::BUNDLED.iter().find(|(n, _)| *n == name).unwrap().1
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn train(dir: &Path, scenario: &str, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--scenario", scenario, "--out", p(dir)];
    args.extend_from_slice(extra);
    stlnet(&args)
}

/// Log rows without the wall-clock column.
fn log_without_seconds(dir: &Path) -> Vec<String> {
    fs::read_to_string(dir.join("log.csv"))
        .unwrap()
        .lines()
        .map(|l| l.rsplit_once(',').unwrap().0.to_string())
        .collect()
}

#[test]
fn scenarios_list_names_every_bundled_scenario() {
    let o = stlnet(&["scenarios", "list"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    for name in ["dubins_k10", "dubins_k1000", "multi_dubins_10", "quad6_platform", "quad12", "integrator2d", "scalar_fig6"] {
        assert!(out.contains(name), "missing {name}");
    }
    assert_eq!(out.lines().count(), 10);
}

#[test]
fn train_dubins_k100_reaches_positive_robustness() {
    let dir = TempDir::new().unwrap();
    let o = train(dir.path(), "dubins_k100", &["--seed", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let summary = json(&dir.path().join("summary.json"));
    assert!(summary["final_rho"].as_f64().unwrap() > 0.0);
    assert_eq!(summary["satisfied"], true);
    let counts = summary["branch_counts"].as_object().unwrap();
    let total: u64 = counts.values().map(|v| v.as_u64().unwrap()).sum();
    assert_eq!(total, summary["iterations"].as_u64().unwrap());
    let manifest = json(&dir.path().join("manifest.json"));
    assert_eq!(manifest["seed"], 1);
    assert_eq!(manifest["scenario_sha256"].as_str().unwrap().len(), 64);
    assert!(fs::read_to_string(dir.path().join("log.csv")).unwrap().starts_with("iter,rho,branch,lr,seconds\n"));
    assert!(dir.path().join("checkpoint.json").exists());
}

#[test]
fn same_seed_gives_identical_logs() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    for d in [&a, &b] {
        assert_eq!(code(&train(d.path(), "dubins_k10", &["--seed", "7", "--algorithm", "vanilla"])), 0);
    }
    assert_eq!(log_without_seconds(a.path()), log_without_seconds(b.path()));
    assert_eq!(
        fs::read_to_string(a.path().join("checkpoint.json")).unwrap(),
        fs::read_to_string(b.path().join("checkpoint.json")).unwrap()
    );
}

#[test]
fn invalid_widths_is_a_validation_error_naming_the_field() {
    let dir = TempDir::new().unwrap();
    let text = source("dubins_k10").replace("widths = [3, 20, 2]", "widths = [4, 20, 2]");
    let path = dir.path().join("bad.toml");
    fs::write(&path, text).unwrap();
    let o = train(&dir.path().join("out"), p(&path), &[]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("policy.widths[0]"), "{}", stderr(&o));
}

#[test]
fn unseeded_scenario_is_refused() {
    let dir = TempDir::new().unwrap();
    let text: String = source("dubins_k10")
        .lines()
        .filter(|l| !l.starts_with("seed"))
        .map(|l| format!("{l}\n"))
        .collect();
    let path = dir.path().join("unseeded.toml");
    fs::write(&path, text).unwrap();
    let o = train(&dir.path().join("out"), p(&path), &["--seed", "3"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("seed"), "{}", stderr(&o));
}

#[test]
fn unknown_scenario_is_a_validation_error() {
    let dir = TempDir::new().unwrap();
    assert_eq!(code(&train(dir.path(), "no_such_scenario", &[])), 2);
}

#[test]
fn exhausted_budget_exits_with_dnf_and_still_writes_outputs() {
    let dir = TempDir::new().unwrap();
    let o = train(dir.path(), "dubins_k100", &["--seed", "1", "--max-iters", "1"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert_eq!(json(&dir.path().join("summary.json"))["did_not_finish"], true);
    assert!(dir.path().join("checkpoint.json").exists());
}

fn write_trace(dir: &Path, xs: &[f64]) -> String {
    let mut csv = String::from("k,s_0\n");
    for (k, x) in xs.iter().enumerate() {
        csv.push_str(&format!("{k},{x}\n"));
    }
    let path = dir.join("trace.csv");
    fs::write(&path, csv).unwrap();
    p(&path).to_string()
}

#[test]
fn monitor_reports_robustness_and_critical_time() {
    let dir = TempDir::new().unwrap();
    let trace = write_trace(dir.path(), &[1.0, 2.0, 3.0, 1.5]);
    let o = stlnet(&["monitor", "--formula", "F[0,3](x0 > 0)", "--trace", &trace]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("rho: 3\n"), "{out}");
    assert!(out.contains("satisfied: true"));
    assert!(out.contains("critical_time: 2"));
}

#[test]
fn monitor_smooth_value_is_a_lower_bound() {
    let dir = TempDir::new().unwrap();
    let trace = write_trace(dir.path(), &[1.0, 2.0, 3.0, 1.5]);
    let o = stlnet(&["monitor", "--formula", "F[0,3](x0 > 0) && G[0,3](x0 > 0.5)", "--trace", &trace, "--smooth", "5"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let value = |key: &str| -> f64 {
        let out = stdout(&o);
        let line = out.lines().find(|l| l.starts_with(key)).unwrap();
        line.split_once(": ").unwrap().1.parse().unwrap()
    };
    assert!(value("smooth_rho") <= value("rho:"));
}

#[test]
fn monitor_rejects_a_short_trace() {
    let dir = TempDir::new().unwrap();
    let trace = write_trace(dir.path(), &[1.0, 2.0]);
    let o = stlnet(&["monitor", "--formula", "F[0,3](x0 > 0)", "--trace", &trace]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("too short"), "{}", stderr(&o));
}

#[test]
fn monitor_rejects_a_bad_formula() {
    let dir = TempDir::new().unwrap();
    let trace = write_trace(dir.path(), &[1.0]);
    assert_eq!(code(&stlnet(&["monitor", "--formula", "F[0,3](x0 >", "--trace", &trace])), 2);
}

fn verify(scenario: &str, checkpoint: &Path, out: &Path, extra: &[&str]) -> Value {
    let mut args = vec!["verify", "--scenario", scenario, "--checkpoint", p(checkpoint), "--out", p(out)];
    args.extend_from_slice(extra);
    let o = stlnet(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    json(&out.join("report.json"))
}

#[test]
fn verify_trained_and_untrained_checkpoints() {
    let trained = TempDir::new().unwrap();
    assert_eq!(code(&train(trained.path(), "dubins_k100", &["--seed", "1"])), 0);
    let r = verify("dubins_k100", &trained.path().join("checkpoint.json"), &trained.path().join("v"), &[]);
    assert_eq!(r["m"], 2000);
    assert_eq!(r["ell"], 1991);
    assert_eq!(r["verdict"], true);

    let untrained = TempDir::new().unwrap();
    assert_eq!(code(&train(untrained.path(), "dubins_k100", &["--seed", "1", "--max-iters", "1"])), 3);
    let r = verify("dubins_k100", &untrained.path().join("checkpoint.json"), &untrained.path().join("v"), &[]);
    assert_eq!(r["verdict"], false);
    assert!(r["R_ell"].as_f64().unwrap() >= 0.0);
}

#[test]
fn verify_large_calibration_echoes_rank() {
    let dir = TempDir::new().unwrap();
    assert_eq!(code(&train(dir.path(), "dubins_k10", &["--seed", "1"])), 0);
    let r = verify(
        "dubins_k10",
        &dir.path().join("checkpoint.json"),
        &dir.path().join("v"),
        &["--m", "100000", "--coverage", "0.9999", "--delta1", "0.9998"],
    );
    assert_eq!(r["ell"], 99991);
    assert!((r["confidence"].as_f64().unwrap() - 0.995).abs() < 1e-3);
}

#[test]
fn verify_rejects_a_checkpoint_for_another_plant() {
    let dir = TempDir::new().unwrap();
    assert_eq!(code(&train(dir.path(), "dubins_k10", &["--seed", "1"])), 0);
    let o = stlnet(&[
        "verify",
        "--scenario",
        "integrator2d",
        "--checkpoint",
        p(&dir.path().join("checkpoint.json")),
        "--out",
        p(&dir.path().join("v")),
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn simulate_single_noiseless_trial_satisfies() {
    let dir = TempDir::new().unwrap();
    assert_eq!(code(&train(dir.path(), "dubins_k100", &["--seed", "1"])), 0);
    let out = dir.path().join("sim");
    let o = stlnet(&[
        "simulate",
        "--scenario",
        "dubins_k100",
        "--checkpoint",
        p(&dir.path().join("checkpoint.json")),
        "--out",
        p(&out),
        "--trials",
        "1",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let sim = json(&out.join("simulation.json"));
    assert_eq!(sim["success_rate"], 1.0);
    let trace = fs::read_to_string(out.join("traces/trial_0.csv")).unwrap();
    assert_eq!(trace.lines().count(), 102);

    let m = stlnet(&["monitor", "--formula", &stlnet_formula("dubins_k100"), "--trace", p(&out.join("traces/trial_0.csv"))]);
    assert!(stdout(&m).contains("satisfied: true"), "{}", stderr(&m));
}

fn stlnet_formula(name: &str) -> String {
    stlnet::scenario::bundled(name).unwrap().unwrap().formula.to_string()
}

#[test]
fn simulate_zero_trials_is_an_error() {
    let dir = TempDir::new().unwrap();
    assert_eq!(code(&train(dir.path(), "dubins_k10", &["--seed", "1"])), 0);
    let o = stlnet(&[
        "simulate",
        "--scenario",
        "dubins_k10",
        "--checkpoint",
        p(&dir.path().join("checkpoint.json")),
        "--out",
        p(&dir.path().join("sim")),
        "--trials",
        "0",
    ]);
    assert_eq!(code(&o), 2);
    assert!(!dir.path().join("sim").exists());
}

#[test]
fn noise_trained_feedback_survives_noisy_deployment() {
    let dir = TempDir::new().unwrap();
    let o = train(dir.path(), "integrator2d", &["--seed", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = dir.path().join("sim");
    let o = stlnet(&[
        "simulate",
        "--scenario",
        "integrator2d",
        "--checkpoint",
        p(&dir.path().join("checkpoint.json")),
        "--out",
        p(&out),
        "--trials",
        "500",
        "--noise",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rate = json(&out.join("simulation.json"))["success_rate"].as_f64().unwrap();
    assert!(rate >= 0.8, "rate {rate}");
}
