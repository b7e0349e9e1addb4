#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use stlnet::plant::{NoiseLevel, Rollout};
use stlnet::policy::Checkpoint;
use stlnet::scenario::{self, Algorithm, Scenario};
use stlnet::smooth::{smooth_robustness, SmoothConfig};
use stlnet::stl;
use stlnet::trainer::{self, Problem, TrainLog};
use stlnet::verify::{self, Controller, Deployment};
use stlnet::Execution;

#[derive(Parser)]
#[command(name = "stlnet", version, about = "Train and verify neural feedback controllers against STL specifications")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a controller and write checkpoint, log, summary and manifest.
    Train {
        /// Bundled scenario name or path to a scenario file.
        #[arg(long)]
        scenario: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        algorithm: Option<AlgorithmArg>,
        #[arg(long)]
        max_iters: Option<usize>,
    },
    /// Evaluate a formula on a trace csv.
    Monitor {
        #[arg(long)]
        formula: String,
        #[arg(long)]
        trace: PathBuf,
        /// Also report smooth robustness with this sharpness.
        #[arg(long)]
        smooth: Option<f64>,
    },
    /// Calibrate a checkpoint and write a verification report.
    Verify {
        #[arg(long)]
        scenario: String,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        coverage: Option<f64>,
        #[arg(long)]
        delta1: Option<f64>,
        /// Deploy under the scenario noise levels.
        #[arg(long)]
        noise: bool,
    },
    /// Deploy a checkpoint and write per-trial traces and the success rate.
    Simulate {
        #[arg(long)]
        scenario: String,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1)]
        trials: usize,
        #[arg(long)]
        noise: bool,
    },
    /// Bundled scenarios.
    Scenarios {
        #[command(subcommand)]
        action: ScenariosAction,
    },
}

#[derive(Subcommand)]
enum ScenariosAction {
    List,
}

#[derive(Clone, Copy, ValueEnum)]
enum AlgorithmArg {
    Dropout,
    Vanilla,
    OpenLoop,
}

impl From<AlgorithmArg> for Algorithm {
    fn from(a: AlgorithmArg) -> Self {
        match a {
            AlgorithmArg::Dropout => Algorithm::Dropout,
            AlgorithmArg::Vanilla => Algorithm::Vanilla,
            AlgorithmArg::OpenLoop => Algorithm::OpenLoop,
        }
    }
}

fn algorithm_name(a: Algorithm) -> &'static str {
    match a {
        Algorithm::Dropout => "dropout",
        Algorithm::Vanilla => "vanilla",
        Algorithm::OpenLoop => "open_loop",
    }
}

#[derive(Debug)]
enum Failure {
    Validation(String),
    DidNotFinish(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 2,
            Failure::DidNotFinish(_) => 3,
            Failure::Runtime(_) => 4,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Validation(m) => write!(f, "invalid input: {m}"),
            Failure::DidNotFinish(m) => write!(f, "did not finish: {m}"),
            Failure::Runtime(m) => write!(f, "runtime failure: {m}"),
        }
    }
}

impl From<stlnet::Error> for Failure {
    fn from(e: stlnet::Error) -> Self {
        use stlnet::plant::PlantError;
        match e {
            stlnet::Error::Plant(PlantError::Diverged { .. }) | stlnet::Error::Tape(_) => Failure::Runtime(e.to_string()),
            _ => Failure::Validation(e.to_string()),
        }
    }
}

impl From<scenario::ScenarioError> for Failure {
    fn from(e: scenario::ScenarioError) -> Self {
        Failure::Validation(e.to_string())
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("stlnet: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn run(cmd: Command) -> CliResult {
    match cmd {
        Command::Train { scenario, seed, out, algorithm, max_iters } => {
            train(&scenario, seed, &out, algorithm.map(Into::into), max_iters)
        }
        Command::Monitor { formula, trace, smooth } => monitor(&formula, &trace, smooth),
        Command::Verify { scenario, checkpoint, out, seed, m, coverage, delta1, noise } => {
            verify_cmd(&scenario, &checkpoint, &out, seed, m, coverage, delta1, noise)
        }
        Command::Simulate { scenario, checkpoint, out, seed, trials, noise } => {
            simulate(&scenario, &checkpoint, &out, seed, trials, noise)
        }
        Command::Scenarios { action: ScenariosAction::List } => {
            for (name, _) in scenario::BUNDLED {
                let s = scenario::bundled(name).expect("listed").map_err(Failure::from)?;
                println!("{name:<16} {:<8} K={:<5} {}", algorithm_name(s.algorithm), s.horizon, s.description);
            }
            Ok(())
        }
    }
}

/// A bundled name or a path to a scenario file.
fn load_scenario(arg: &str, seed: Option<u64>) -> CliResult<Scenario> {
    let s = match scenario::bundled(arg) {
        Some(r) => r?,
        None => {
            let path = Path::new(arg);
            if !path.exists() {
                return Err(Failure::Validation(format!("`{arg}` is neither a bundled scenario nor a file")));
            }
            Scenario::load(path)?
        }
    };
    Ok(match seed {
        Some(seed) => s.with_seed(seed),
        None => s,
    })
}

fn write(dir: &Path, name: &str, contents: &str) -> CliResult {
    fs::write(dir.join(name), contents).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.join(name).display())))
}

fn make_dir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))
}

fn pretty(v: &Value) -> String {
    serde_json::to_string_pretty(v).expect("json value serializes") + "\n"
}

fn manifest(s: &Scenario, command: &str, extra: Value) -> Value {
    let mut m = json!({
        "command": command,
        "scenario": s.name,
        "scenario_sha256": s.hash(),
        "seed": s.seed,
        "algorithm": algorithm_name(s.algorithm),
        "version": env!("CARGO_PKG_VERSION"),
    });
    if let (Value::Object(m), Value::Object(extra)) = (&mut m, extra) {
        m.extend(extra);
    }
    m
}

/// Non-finite values are written as strings so the json stays valid.
fn num(x: f64) -> Value {
    if x.is_finite() {
        json!(x)
    } else {
        json!(x.to_string())
    }
}

fn train(arg: &str, seed: Option<u64>, out: &Path, algorithm: Option<Algorithm>, max_iters: Option<usize>) -> CliResult {
    let mut s = load_scenario(arg, seed)?;
    if let Some(a) = algorithm {
        s.algorithm = a;
    }
    if let Some(n) = max_iters {
        s.train.max_iters = n;
    }
    make_dir(out)?;
    let problem = Problem {
        plant: &s.plant,
        policy: &s.policy,
        formula: &s.formula,
        init: &s.init.samples,
        horizon: s.horizon,
    };
    let (checkpoint, log) = match s.algorithm {
        Algorithm::Dropout | Algorithm::Vanilla => {
            let theta0 = s.initial_theta();
            let outcome = if s.algorithm == Algorithm::Dropout {
                trainer::train_dropout(&problem, &theta0, s.waypoints.as_ref(), &s.train)?
            } else {
                trainer::train_vanilla(&problem, &theta0, &s.train)?
            };
            let mut c = Checkpoint::new(&s.policy, &s.plant.name, outcome.theta);
            c.metadata.insert("scenario".into(), json!(s.name));
            c.metadata.insert("seed".into(), json!(s.seed));
            (c.to_json(), outcome.log)
        }
        Algorithm::OpenLoop => {
            let actions0 = vec![vec![0.0; s.plant.action_dim()]; s.horizon];
            let outcome = trainer::train_openloop(&s.plant, &s.formula, &s.nominal_state(), &actions0, &s.train)?;
            let c = json!({ "plant": s.plant.name, "actions": outcome.actions });
            (pretty(&c), outcome.log)
        }
    };
    write(out, "checkpoint.json", &checkpoint)?;
    write(out, "log.csv", &log.to_csv())?;
    write(out, "summary.json", &pretty(&summary(&log)))?;
    write(out, "manifest.json", &pretty(&manifest(&s, "train", json!({ "max_iters": s.train.max_iters }))))?;
    println!(
        "{}: {} iterations, final rho {:.6}{}",
        s.name,
        log.iterations(),
        log.final_rho(),
        if log.did_not_finish { " (did not finish)" } else { "" }
    );
    if log.did_not_finish {
        return Err(Failure::DidNotFinish(format!("rho {:.6} after {} iterations", log.final_rho(), log.iterations())));
    }
    Ok(())
}

fn summary(log: &TrainLog) -> Value {
    let counts: serde_json::Map<String, Value> =
        log.branch_counts().into_iter().map(|(b, n)| (b.as_str().to_string(), json!(n))).collect();
    json!({
        "iterations": log.iterations(),
        "final_rho": num(log.final_rho()),
        "final_rhos": log.final_rhos.iter().copied().map(num).collect::<Vec<_>>(),
        "satisfied": log.final_rho() > 0.0,
        "did_not_finish": log.did_not_finish,
        "retries": log.retries,
        "branch_counts": counts,
    })
}

fn monitor(text: &str, trace: &Path, smooth: Option<f64>) -> CliResult {
    let formula = stl::parse(text).map_err(|e| Failure::Validation(e.to_string()))?;
    let csv = fs::read_to_string(trace).map_err(|e| Failure::Runtime(format!("{}: {e}", trace.display())))?;
    let tr = Rollout::from_csv(&csv).map_err(|e| Failure::Validation(e.to_string()))?.trace();
    let fail = |e: stl::StlError| Failure::Validation(e.to_string());
    let rho = stl::robustness(&formula, &tr).map_err(fail)?;
    let w = stl::critical(&formula, &tr).map_err(fail)?;
    println!("rho: {rho}");
    println!("satisfied: {}", stl::satisfies(&formula, &tr).map_err(fail)?);
    println!("critical_time: {}", w.time);
    println!("critical_predicate: {}", w.predicate);
    if let Some(b) = smooth {
        if !(b > 0.0) {
            return Err(Failure::Validation("--smooth must be positive".into()));
        }
        let v = smooth_robustness(&formula, &tr, &SmoothConfig { b }).map_err(fail)?;
        println!("smooth_rho: {v}");
    }
    Ok(())
}

enum Loaded {
    Feedback(stlnet::policy::Policy, Vec<f64>),
    OpenLoop(Vec<Vec<f64>>),
}

impl Loaded {
    fn controller(&self) -> Controller<'_> {
        match self {
            Loaded::Feedback(policy, theta) => Controller::Feedback { policy, theta },
            Loaded::OpenLoop(actions) => Controller::OpenLoop(actions),
        }
    }
}

fn load_checkpoint(path: &Path, s: &Scenario) -> CliResult<Loaded> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    let bad = |m: String| Failure::Validation(format!("{}: {m}", path.display()));
    let value: Value = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    let plant = value.get("plant").and_then(Value::as_str).unwrap_or_default();
    if plant != s.plant.name {
        return Err(bad(format!("checkpoint is for plant `{plant}`, scenario uses `{}`", s.plant.name)));
    }
    if let Some(actions) = value.get("actions") {
        let actions: Vec<Vec<f64>> = serde_json::from_value(actions.clone()).map_err(|e| bad(e.to_string()))?;
        return Ok(Loaded::OpenLoop(actions));
    }
    let c = Checkpoint::from_json(&text).map_err(|e| bad(e.to_string()))?;
    let policy = c.policy().map_err(|e| bad(e.to_string()))?;
    if policy.input_dim() != s.plant.state_dim() + 1 || policy.output_dim() != s.plant.action_dim() {
        return Err(bad("network shape does not match the scenario plant".into()));
    }
    Ok(Loaded::Feedback(policy, c.theta))
}

fn noise_level(s: &Scenario, on: bool) -> NoiseLevel {
    if on {
        s.noise
    } else {
        NoiseLevel::default()
    }
}

#[allow(clippy::too_many_arguments)]
fn verify_cmd(
    arg: &str,
    checkpoint: &Path,
    out: &Path,
    seed: Option<u64>,
    m: Option<usize>,
    coverage: Option<f64>,
    delta1: Option<f64>,
    noise: bool,
) -> CliResult {
    let s = load_scenario(arg, seed)?;
    let loaded = load_checkpoint(checkpoint, &s)?;
    let m = m.unwrap_or(s.verify.m);
    let coverage = coverage.unwrap_or(s.verify.coverage);
    let delta1 = delta1.or(s.verify.delta1).unwrap_or(coverage);
    let dep = Deployment {
        plant: &s.plant,
        controller: loaded.controller(),
        formula: &s.formula,
        horizon: s.horizon,
        init: &s.verify_init,
        noise: noise_level(&s, noise),
    };
    let cal = verify::calibrate(&dep, m, s.seed, Execution::default())?;
    let report = verify::report(&cal, coverage, delta1)?;
    make_dir(out)?;
    let mut v = serde_json::to_value(&report).expect("report serializes");
    v["R_ell"] = num(report.r_ell);
    write(out, "report.json", &pretty(&v))?;
    write(out, "manifest.json", &pretty(&manifest(&s, "verify", json!({ "m": m, "noise": noise }))))?;
    println!(
        "m={} ell={} R_ell={} confidence={:.6} verdict={}",
        report.m, report.ell, report.r_ell, report.confidence, report.verdict
    );
    Ok(())
}

fn simulate(arg: &str, checkpoint: &Path, out: &Path, seed: Option<u64>, trials: usize, noise: bool) -> CliResult {
    if trials == 0 {
        return Err(Failure::Validation("--trials must be at least 1; the success rate of zero trials is undefined".into()));
    }
    let s = load_scenario(arg, seed)?;
    let loaded = load_checkpoint(checkpoint, &s)?;
    let dep = Deployment {
        plant: &s.plant,
        controller: loaded.controller(),
        formula: &s.formula,
        horizon: s.horizon,
        init: &s.verify_init,
        noise: noise_level(&s, noise),
    };
    let rate = verify::success_rate(&dep, trials, s.seed, Execution::default())?;
    let traces = out.join("traces");
    make_dir(&traces)?;
    let width = (trials - 1).to_string().len();
    let mut satisfied = Vec::with_capacity(trials);
    for i in 0..trials {
        let name = format!("trial_{i:0width$}.csv");
        match dep.trial(s.seed, i as u64) {
            Ok(r) => {
                satisfied.push(json!(stl::satisfies(&s.formula, &r.trace()).map_err(|e| Failure::Runtime(e.to_string()))?));
                write(&traces, &name, &r.to_csv())?;
            }
            Err(_) => satisfied.push(json!("diverged")),
        }
    }
    write(
        out,
        "simulation.json",
        &pretty(&json!({ "trials": trials, "noise": noise, "success_rate": rate, "satisfied": satisfied })),
    )?;
    write(out, "manifest.json", &pretty(&manifest(&s, "simulate", json!({ "trials": trials, "noise": noise }))))?;
    println!("success rate {rate} over {trials} trials");
    Ok(())
}
