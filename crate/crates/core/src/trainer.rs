//! Training loops: dropout training with critical predicates, plain smooth
//! gradient ascent, and open-loop action optimization.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::exec::Execution;
use crate::plant::{rollout, rollout_generic, NoiseDraw, NoiseLevel, Plant, PlantError, Rollout};
use crate::policy::{AdamConfig, AdamState, Policy};
use crate::scalar::Scalar;
use crate::sampler::{
    build_sampled, grad_critical, grad_smooth, partition_times, sample_times, smooth_gradient, SampledTrajectory,
    TimePartition,
};
use crate::smooth::{smooth_robustness, SmoothConfig};
use crate::stl::{critical, robustness, Formula, Trace};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitRule {
    /// The member of the training sample with the lowest robustness.
    #[default]
    Worst,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Learning-rate floor of the step-halving search.
    pub epsilon: f64,
    /// Number of sets per time partition.
    pub m: usize,
    /// Number of sampled steps per sampled trajectory.
    pub n: usize,
    /// Inner iterations of the critical/waypoint branch.
    pub n1: usize,
    /// Inner iterations of the smooth branch.
    pub n2: usize,
    /// Training stops once robustness exceeds this value.
    pub rho_bar: f64,
    pub smooth: SmoothConfig,
    pub max_iters: usize,
    pub init_rule: InitRule,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Plain gradient ascent only: use one time partition per step instead of the full trajectory.
    pub time_sampling: bool,
    /// Noise applied to training rollouts. Termination checks are always noiseless.
    pub train_noise: NoiseLevel,
    /// Run exactly `max_iters` iterations, ignoring the termination test.
    pub fixed_iters: bool,
    /// Consecutive aborted iterations tolerated before giving up.
    pub max_retries: usize,
    pub exec: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            m: 10,
            n: 5,
            n1: 30,
            n2: 3,
            rho_bar: 0.0,
            smooth: SmoothConfig::default(),
            max_iters: 1000,
            init_rule: InitRule::Worst,
            seed: 0,
            adam: AdamConfig::default(),
            time_sampling: false,
            train_noise: NoiseLevel::default(),
            fixed_iters: false,
            max_retries: 100,
            exec: Execution::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(m.into()));
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        if self.m == 0 || self.n == 0 || self.n1 == 0 || self.n2 == 0 {
            return bad("m, n, n1 and n2 must be at least 1");
        }
        if self.max_iters == 0 && !self.fixed_iters {
            return bad("max_iters must be at least 1");
        }
        if !(self.smooth.b > 0.0) {
            return bad("smoothing sharpness b must be positive");
        }
        Ok(())
    }
}

/// Objective that produced a committed update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Waypoint,
    Critical,
    Smooth,
}

impl Branch {
    pub fn as_str(self) -> &'static str {
        match self {
            Branch::Waypoint => "waypoint",
            Branch::Critical => "critical",
            Branch::Smooth => "smooth",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    /// Worst robustness over the training sample before the update.
    pub rho: f64,
    pub branch: Branch,
    /// Step fraction accepted by the halving search, 1 otherwise.
    pub lr: f64,
    pub seconds: f64,
    /// Index of the initial state trained on.
    pub s0: usize,
    /// Robustness on that state before and after the update.
    pub rho_before: f64,
    pub rho_after: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<IterRecord>,
    /// Robustness of the returned parameters on each training initial state.
    pub final_rhos: Vec<f64>,
    pub did_not_finish: bool,
    pub retries: usize,
}

impl TrainLog {
    pub fn iterations(&self) -> usize {
        self.records.len()
    }

    pub fn final_rho(&self) -> f64 {
        self.final_rhos.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn branch_counts(&self) -> BTreeMap<Branch, usize> {
        let mut out = BTreeMap::new();
        for r in &self.records {
            *out.entry(r.branch).or_default() += 1;
        }
        out
    }

    /// `iter,rho,branch,lr,seconds`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,rho,branch,lr,seconds\n");
        for r in &self.records {
            writeln!(out, "{},{:e},{},{:e},{:.6}", r.iter, r.rho, r.branch.as_str(), r.lr, r.seconds).unwrap();
        }
        out
    }
}

/// Desired states at selected time-steps. Only masked dimensions are penalized.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct WaypointPath {
    pub points: BTreeMap<usize, (Vec<f64>, Vec<bool>)>,
}

impl WaypointPath {
    pub fn insert(&mut self, k: usize, target: Vec<f64>, mask: Vec<bool>) {
        assert_eq!(target.len(), mask.len());
        self.points.insert(k, (target, mask));
    }

    /// Piecewise-linear path through `knots` (time, target), one entry per time-step.
    pub fn interpolate(knots: &[(usize, Vec<f64>)], mask: Vec<bool>) -> Self {
        let mut wp = Self::default();
        for w in knots.windows(2) {
            let ((k0, a), (k1, b)) = (&w[0], &w[1]);
            assert!(k1 > k0, "knots must be increasing");
            for k in *k0..*k1 {
                let t = (k - k0) as f64 / (k1 - k0) as f64;
                let p = a.iter().zip(b).map(|(x, y)| x + t * (y - x)).collect();
                wp.insert(k, p, mask.clone());
            }
        }
        if let Some((k, p)) = knots.last() {
            wp.insert(*k, p.clone(), mask);
        }
        wp
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn max_time(&self) -> Option<usize> {
        self.points.keys().next_back().copied()
    }
}

/// `-Σ ‖(s_t - w_t) ⊙ mask‖²` over the anchors that have a waypoint.
pub fn waypoint_objective<'t>(smpl: &SampledTrajectory<'t>, wp: &WaypointPath) -> Var<'t> {
    let mut acc = smpl.anchors[0][0].lift(0.0);
    for (&t, s) in smpl.times.times().iter().zip(&smpl.anchors) {
        if let Some((target, mask)) = wp.points.get(&t) {
            for ((&x, &w), &on) in s.iter().zip(target).zip(mask) {
                if on {
                    let d = x - w;
                    acc = acc - d * d;
                }
            }
        }
    }
    acc
}

/// What is being trained: plant, network shape, specification and the finite
/// set of initial states the controller must satisfy.
#[derive(Debug, Clone, Copy)]
pub struct Problem<'a> {
    pub plant: &'a Plant,
    pub policy: &'a Policy,
    pub formula: &'a Formula,
    pub init: &'a [Vec<f64>],
    pub horizon: usize,
}

impl Problem<'_> {
    pub fn validate(&self, theta: &[f64]) -> Result<()> {
        self.policy.check_params(theta.len())?;
        if self.policy.input_dim() != self.plant.state_dim() + 1 {
            return Err(Error::Invalid(format!(
                "policy input width {} must be state dimension {} + 1",
                self.policy.input_dim(),
                self.plant.state_dim()
            )));
        }
        if self.policy.output_dim() != self.plant.action_dim() {
            return Err(Error::Invalid(format!(
                "policy output width {} must equal action dimension {}",
                self.policy.output_dim(),
                self.plant.action_dim()
            )));
        }
        if self.formula.horizon() > self.horizon {
            return Err(Error::Invalid(format!(
                "formula horizon {} exceeds rollout horizon {}",
                self.formula.horizon(),
                self.horizon
            )));
        }
        self.formula.check_dimension(self.plant.state_dim())?;
        if self.init.is_empty() {
            return Err(Error::Invalid("no initial states".into()));
        }
        Ok(())
    }

    fn rollout(&self, theta: &[f64], s0: &[f64], noise: Option<&NoiseDraw>) -> Result<Rollout, PlantError> {
        rollout(self.plant, self.policy, theta, s0, self.horizon, noise)
    }

    /// Exact robustness, `-∞` when the rollout diverges.
    pub fn rho(&self, theta: &[f64], s0: &[f64], noise: Option<&NoiseDraw>) -> f64 {
        match self.rollout(theta, s0, noise) {
            Ok(r) => robustness(self.formula, &r.trace()).expect("validated horizon"),
            Err(_) => f64::NEG_INFINITY,
        }
    }

    /// Exact robustness on every training initial state.
    pub fn rhos(&self, theta: &[f64], exec: Execution) -> Vec<f64> {
        exec.map(self.init, |s0| self.rho(theta, s0, None))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub theta: Vec<f64>,
    pub log: TrainLog,
}

fn argmin(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x < xs[best] {
            best = i;
        }
    }
    best
}

fn min_of(xs: &[f64]) -> f64 {
    xs.iter().copied().fold(f64::INFINITY, f64::min)
}

fn scaled(g: &[f64], by: f64) -> Vec<f64> {
    g.iter().map(|x| x / by).collect()
}

struct Loop {
    rng: ChaCha8Rng,
    start: Instant,
    log: TrainLog,
    best: (f64, Vec<f64>, Vec<f64>),
    streak: usize,
}

impl Loop {
    fn new(cfg: &TrainConfig, theta: &[f64]) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            start: Instant::now(),
            log: TrainLog::default(),
            best: (f64::NEG_INFINITY, theta.to_vec(), Vec::new()),
            streak: 0,
        }
    }

    fn pick(&mut self, rule: InitRule, rhos: &[f64]) -> usize {
        match rule {
            InitRule::Worst => argmin(rhos),
            InitRule::Random => self.rng.random_range(0..rhos.len()),
        }
    }

    fn noise(&mut self, cfg: &TrainConfig, dim: usize, horizon: usize) -> Option<NoiseDraw> {
        let nl = cfg.train_noise;
        (!nl.is_zero()).then(|| NoiseDraw::sample(dim, horizon, nl.c1, nl.c2, &mut self.rng))
    }

    fn retry(&mut self, cfg: &TrainConfig, why: Error) -> Result<()> {
        self.log.retries += 1;
        self.streak += 1;
        if self.streak > cfg.max_retries {
            return Err(why);
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn record(&mut self, rho: f64, branch: Branch, lr: f64, s0: usize, before: f64, after: f64) {
        self.streak = 0;
        let iter = self.log.records.len() + 1;
        self.log.records.push(IterRecord {
            iter,
            rho,
            branch,
            lr,
            seconds: self.start.elapsed().as_secs_f64(),
            s0,
            rho_before: before,
            rho_after: after,
        });
    }

    fn finish(mut self, theta: Vec<f64>, rhos: Vec<f64>, dnf: bool) -> TrainOutcome {
        let (theta, rhos) = if dnf && self.best.0 > min_of(&rhos) {
            let (_, th, r) = std::mem::take(&mut self.best);
            (th, r)
        } else {
            (theta, rhos)
        };
        self.log.final_rhos = rhos;
        self.log.did_not_finish = dnf;
        TrainOutcome { theta, log: self.log }
    }
}

/// Gradient-sampling training with critical predicates, an optional waypoint
/// path and fallback to the smooth robustness.
pub fn train_dropout(
    problem: &Problem<'_>,
    theta0: &[f64],
    waypoints: Option<&WaypointPath>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    problem.validate(theta0)?;
    cfg.validate()?;
    let p = problem;
    let k_total = p.horizon;
    let waypoints = waypoints.filter(|w| !w.is_empty());
    let mut lp = Loop::new(cfg, theta0);
    let mut theta = theta0.to_vec();
    let len = theta.len();
    let mut adam_crit = AdamState::new(len, cfg.adam);
    let mut adam_wp = AdamState::new(len, cfg.adam);
    let mut adam_smooth = AdamState::new(len, cfg.adam);

    loop {
        let rhos = p.rhos(&theta, cfg.exec);
        let worst = min_of(&rhos);
        if worst > lp.best.0 {
            lp.best = (worst, theta.clone(), rhos.clone());
        }
        if !cfg.fixed_iters && worst > cfg.rho_bar {
            let out = lp.finish(theta, rhos, false);
            return Ok(out);
        }
        if lp.log.records.len() >= cfg.max_iters {
            let dnf = !cfg.fixed_iters || worst <= cfg.rho_bar;
            return Ok(lp.finish(theta, rhos, dnf));
        }

        let idx = lp.pick(cfg.init_rule, &rhos);
        let s0 = &p.init[idx];
        let noise = lp.noise(cfg, p.plant.state_dim(), k_total);
        let nz = noise.as_ref();
        let rho_j = p.rho(&theta, s0, nz);
        if rho_j == f64::NEG_INFINITY {
            // Only an unguarded smooth commit can get here; fall back to the best parameters.
            lp.retry(cfg, PlantError::Diverged { step: k_total }.into())?;
            if lp.best.0 == f64::NEG_INFINITY {
                return Err(PlantError::Diverged { step: k_total }.into());
            }
            theta = lp.best.1.clone();
            continue;
        }

        // Critical-predicate and waypoint candidates.
        let attempt = (|| -> Result<_> {
            let mut th1 = theta.clone();
            let mut th2 = theta.clone();
            let mut st1 = adam_crit.clone();
            let mut st2 = adam_wp.clone();
            for _ in 0..cfg.n1 {
                let r1 = p.rollout(&th1, s0, nz)?;
                let w = critical(p.formula, &r1.trace())?;
                let d1 = grad_critical(p.plant, p.policy, &th1, &r1, w.time, w.predicate, cfg.n, &mut lp.rng)?;
                st1.update(&mut th1, &scaled(&d1, cfg.n1 as f64))?;
                if let Some(wp) = waypoints {
                    let r2 = p.rollout(&th2, s0, nz)?;
                    let times = sample_times(k_total, cfg.n, &mut lp.rng);
                    let tape = Tape::new();
                    let tv = tape.vars(&th2);
                    let smpl = build_sampled(&tape, p.plant, p.policy, &tv, &r2, &times)?;
                    let j = waypoint_objective(&smpl, wp);
                    let d2 = tape.backward(j, &tv)?;
                    st2.update(&mut th2, &scaled(&d2, cfg.n1 as f64))?;
                }
            }
            Ok((th1, th2, st1, st2))
        })();
        let (th1, th2, st1, st2) = match attempt {
            Ok(v) => v,
            Err(e) => {
                lp.retry(cfg, e)?;
                continue;
            }
        };

        if waypoints.is_some() {
            let rho2 = p.rho(&th2, s0, nz);
            if rho2 >= rho_j {
                lp.record(worst, Branch::Waypoint, 1.0, idx, rho_j, rho2);
                theta = th2;
                adam_wp = st2;
                continue;
            }
        }
        let rho1 = p.rho(&th1, s0, nz);
        if rho1 >= rho_j {
            lp.record(worst, Branch::Critical, 1.0, idx, rho_j, rho1);
            theta = th1;
            adam_crit = st1;
            continue;
        }
        let mut ell = 1.0;
        let mut committed = false;
        while ell >= cfg.epsilon {
            ell /= 2.0;
            let cand: Vec<f64> = theta.iter().zip(&th1).map(|(a, b)| a + ell * (b - a)).collect();
            let rho_hat = p.rho(&cand, s0, nz);
            if rho_hat >= rho_j {
                lp.record(worst, Branch::Critical, ell, idx, rho_j, rho_hat);
                theta = cand;
                adam_crit = st1.clone();
                committed = true;
                break;
            }
        }
        if committed {
            continue;
        }

        // Smooth fallback.
        let attempt = (|| -> Result<_> {
            let mut th3 = theta.clone();
            let mut st3 = adam_smooth.clone();
            for _ in 0..cfg.n2 {
                let r3 = p.rollout(&th3, s0, nz)?;
                let part = partition_times(k_total, cfg.m.min(k_total), &mut lp.rng)?;
                let d3 = grad_smooth(p.plant, p.policy, &th3, &r3, &part, p.formula, &cfg.smooth, cfg.exec)?;
                st3.update(&mut th3, &scaled(&d3, cfg.n2 as f64))?;
            }
            Ok((th3, st3))
        })();
        match attempt {
            Ok((th3, st3)) => {
                let rho3 = p.rho(&th3, s0, nz);
                if rho3 == f64::NEG_INFINITY {
                    lp.retry(cfg, PlantError::Diverged { step: k_total }.into())?;
                    continue;
                }
                lp.record(worst, Branch::Smooth, 1.0, idx, rho_j, rho3);
                theta = th3;
                adam_smooth = st3;
            }
            Err(e) => lp.retry(cfg, e)?,
        }
    }
}

/// Plain gradient ascent on the smooth robustness.
pub fn train_vanilla(problem: &Problem<'_>, theta0: &[f64], cfg: &TrainConfig) -> Result<TrainOutcome> {
    problem.validate(theta0)?;
    cfg.validate()?;
    let p = problem;
    let mut lp = Loop::new(cfg, theta0);
    let mut theta = theta0.to_vec();
    let mut adam = AdamState::new(theta.len(), cfg.adam);
    loop {
        let rhos = p.rhos(&theta, cfg.exec);
        let worst = min_of(&rhos);
        if worst > lp.best.0 {
            lp.best = (worst, theta.clone(), rhos.clone());
        }
        if !cfg.fixed_iters && worst >= cfg.rho_bar {
            return Ok(lp.finish(theta, rhos, false));
        }
        if lp.log.records.len() >= cfg.max_iters {
            let dnf = worst < cfg.rho_bar;
            return Ok(lp.finish(theta, rhos, dnf));
        }
        let idx = lp.pick(cfg.init_rule, &rhos);
        let s0 = &p.init[idx];
        let noise = lp.noise(cfg, p.plant.state_dim(), p.horizon);
        let step = (|| -> Result<Vec<f64>> {
            let reference = p.rollout(&theta, s0, noise.as_ref())?;
            let d = if cfg.time_sampling {
                let part: TimePartition = partition_times(p.horizon, cfg.m.min(p.horizon), &mut lp.rng)?;
                grad_smooth(p.plant, p.policy, &theta, &reference, &part, p.formula, &cfg.smooth, cfg.exec)?
            } else {
                smooth_gradient(p.plant, p.policy, &theta, &reference, p.formula, &cfg.smooth)?.1
            };
            Ok(d)
        })();
        match step {
            Ok(d) => {
                let before = p.rho(&theta, s0, noise.as_ref());
                adam.update(&mut theta, &d)?;
                let after = p.rho(&theta, s0, noise.as_ref());
                lp.record(worst, Branch::Smooth, 1.0, idx, before, after);
            }
            Err(e) => lp.retry(cfg, e)?,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpenLoopOutcome {
    pub actions: Vec<Vec<f64>>,
    pub log: TrainLog,
}

/// Smooth-robustness ascent over a raw action sequence from a single initial state.
pub fn train_openloop(
    plant: &Plant,
    formula: &Formula,
    s0: &[f64],
    actions0: &[Vec<f64>],
    cfg: &TrainConfig,
) -> Result<OpenLoopOutcome> {
    cfg.validate()?;
    let horizon = actions0.len();
    if formula.horizon() > horizon {
        return Err(Error::Invalid(format!(
            "formula horizon {} exceeds {horizon} actions",
            formula.horizon()
        )));
    }
    formula.check_dimension(plant.state_dim())?;
    let m = plant.action_dim();
    if actions0.iter().any(|a| a.len() != m) {
        return Err(Error::Invalid(format!("every action must have {m} components")));
    }
    let rho_of = |flat: &[f64], noise: Option<&NoiseDraw>| -> f64 {
        let acts: Vec<Vec<f64>> = flat.chunks(m).map(<[f64]>::to_vec).collect();
        match crate::plant::rollout_open_loop(plant, s0, &acts, noise) {
            Ok(r) => robustness(formula, &r.trace()).expect("validated horizon"),
            Err(_) => f64::NEG_INFINITY,
        }
    };
    let mut flat: Vec<f64> = actions0.concat();
    let mut lp = Loop::new(cfg, &flat);
    let mut adam = AdamState::new(flat.len(), cfg.adam);
    loop {
        let rho = rho_of(&flat, None);
        if rho > lp.best.0 {
            lp.best = (rho, flat.clone(), vec![rho]);
        }
        let done = !cfg.fixed_iters && rho >= cfg.rho_bar;
        if done || lp.log.records.len() >= cfg.max_iters {
            let dnf = rho < cfg.rho_bar;
            let out = lp.finish(flat, vec![rho], dnf && !done);
            let actions = out.theta.chunks(m).map(<[f64]>::to_vec).collect();
            return Ok(OpenLoopOutcome { actions, log: out.log });
        }
        let noise = lp.noise(cfg, plant.state_dim(), horizon);
        let step = (|| -> Result<Vec<f64>> {
            let tape = Tape::new();
            let av = tape.vars(&flat);
            let (states, _) = rollout_generic(plant, tape.constants(s0), horizon, noise.as_ref(), |_, k| {
                av[k * m..(k + 1) * m].to_vec()
            })?;
            let r = smooth_robustness(formula, &Trace::new(states)?, &cfg.smooth)?;
            Ok(tape.backward(r, &av)?)
        })();
        match step {
            Ok(d) => {
                adam.update(&mut flat, &d)?;
                let after = rho_of(&flat, noise.as_ref());
                lp.record(rho, Branch::Smooth, 1.0, 0, rho, after);
            }
            Err(e) => lp.retry(cfg, e)?,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::InitScheme;
    use crate::stl::parse;

    #[test]
    fn waypoint_objective_is_a_negative_squared_distance() {
        let tape = Tape::new();
        let x = tape.var(2.0);
        let smpl = SampledTrajectory {
            times: crate::sampler::TimeSampleSet::new(vec![0, 4]).unwrap(),
            anchors: vec![vec![tape.constant(0.0)], vec![x]],
        };
        let mut wp = WaypointPath::default();
        wp.insert(4, vec![5.0], vec![true]);
        let j = waypoint_objective(&smpl, &wp);
        assert_eq!(j.value(), -9.0);
        assert_eq!(tape.backward(j, &[x]).unwrap(), vec![6.0]);

        let mut on_target = WaypointPath::default();
        on_target.insert(4, vec![2.0], vec![true]);
        let j = waypoint_objective(&smpl, &on_target);
        assert_eq!((j.value(), tape.backward(j, &[x]).unwrap()[0]), (0.0, 0.0));
    }

    #[test]
    fn interpolated_path_hits_every_step() {
        let wp = WaypointPath::interpolate(&[(0, vec![0.0, 0.0]), (4, vec![4.0, 2.0]), (6, vec![4.0, 4.0])], vec![true, true]);
        assert_eq!(wp.points.len(), 7);
        assert_eq!(wp.points[&2].0, vec![2.0, 1.0]);
        assert_eq!(wp.points[&5].0, vec![4.0, 3.0]);
        assert_eq!(wp.max_time(), Some(6));
    }

    #[test]
    fn waypoint_gradient_matches_finite_differences() {
        let plant = Plant::builtin("dubins").unwrap();
        let policy = Policy::new(vec![3, 6, 2]).unwrap();
        let theta = policy.init(InitScheme::Xavier, &mut ChaCha8Rng::seed_from_u64(5));
        let wp = WaypointPath::interpolate(&[(0, vec![0.0, 0.0]), (8, vec![1.0, 1.5])], vec![true, true]);
        let times = crate::sampler::TimeSampleSet::full(8);
        let j = |th: &[f64]| {
            let r = rollout(&plant, &policy, th, &[0.0, 0.0], 8, None).unwrap();
            let tape = Tape::new();
            let tv = tape.constants(th);
            let s = build_sampled(&tape, &plant, &policy, &tv, &r, &times).unwrap();
            waypoint_objective(&s, &wp).value()
        };
        let r = rollout(&plant, &policy, &theta, &[0.0, 0.0], 8, None).unwrap();
        let tape = Tape::new();
        let tv = tape.vars(&theta);
        let s = build_sampled(&tape, &plant, &policy, &tv, &r, &times).unwrap();
        let g = tape.backward(waypoint_objective(&s, &wp), &tv).unwrap();
        for i in 0..theta.len() {
            let mut hi = theta.clone();
            let mut lo = theta.clone();
            hi[i] += 1e-6;
            lo[i] -= 1e-6;
            let fd = (j(&hi) - j(&lo)) / 2e-6;
            assert!((fd - g[i]).abs() <= 1e-4 * fd.abs().max(1e-2), "{i}: {fd} vs {}", g[i]);
        }
    }

    fn reach_problem() -> (Plant, Policy, Formula, Vec<Vec<f64>>) {
        let plant = Plant::builtin("integrator2d").unwrap();
        let policy = Policy::new(vec![3, 8, 2]).unwrap().with_normalized_time(10);
        let f = parse("F[5,10](x0 > 0.3 && x1 > 0.3)").unwrap();
        (plant, policy, f, vec![vec![-1.0, -1.0]])
    }

    #[test]
    fn satisfied_start_returns_immediately() {
        let (plant, policy, _, init) = reach_problem();
        let f = parse("G[0,10](x0 < 5)").unwrap();
        let p = Problem { plant: &plant, policy: &policy, formula: &f, init: &init, horizon: 10 };
        let theta = vec![0.0; policy.param_count()];
        let out = train_dropout(&p, &theta, None, &TrainConfig::default()).unwrap();
        assert_eq!(out.log.iterations(), 0);
        assert_eq!(out.theta, theta);
        assert!(!out.log.did_not_finish);
    }

    #[test]
    fn dropout_training_solves_a_short_reach_task() {
        let (plant, policy, f, init) = reach_problem();
        let p = Problem { plant: &plant, policy: &policy, formula: &f, init: &init, horizon: 10 };
        let theta = policy.init(InitScheme::Xavier, &mut ChaCha8Rng::seed_from_u64(1));
        let cfg = TrainConfig { m: 3, n: 3, n1: 5, n2: 2, max_iters: 200, seed: 3, ..Default::default() };
        let out = train_dropout(&p, &theta, None, &cfg).unwrap();
        assert!(out.log.final_rho() > 0.0, "{:?}", out.log.records.last());
        for r in &out.log.records {
            if r.branch != Branch::Smooth {
                assert!(r.rho_after >= r.rho_before);
            }
        }
        let again = train_dropout(&p, &theta, None, &cfg).unwrap();
        assert_eq!(again.theta, out.theta);
    }

    #[test]
    fn vanilla_training_solves_a_short_reach_task() {
        let (plant, policy, f, init) = reach_problem();
        let p = Problem { plant: &plant, policy: &policy, formula: &f, init: &init, horizon: 10 };
        let theta = policy.init(InitScheme::Xavier, &mut ChaCha8Rng::seed_from_u64(1));
        let cfg = TrainConfig { max_iters: 500, ..Default::default() };
        let out = train_vanilla(&p, &theta, &cfg).unwrap();
        assert!(out.log.final_rho() >= 0.0 && !out.log.did_not_finish);
        let sampled = train_vanilla(&p, &theta, &TrainConfig { time_sampling: true, m: 3, ..cfg }).unwrap();
        assert!(!sampled.log.did_not_finish);
    }

    #[test]
    fn flat_landscape_is_reported_unfinished() {
        // Robustness is pinned by the fixed initial state, so no update can help.
        let plant = Plant::builtin("integrator2d").unwrap();
        let policy = Policy::new(vec![3, 2]).unwrap();
        let f = parse("G[0,3](x0 > 0)").unwrap();
        let init = vec![vec![-1.0, -1.0]];
        let p = Problem { plant: &plant, policy: &policy, formula: &f, init: &init, horizon: 3 };
        let theta = vec![0.0; policy.param_count()];
        let cfg = TrainConfig { max_iters: 5, ..Default::default() };
        let out = train_vanilla(&p, &theta, &cfg).unwrap();
        assert!(out.log.did_not_finish);
        assert_eq!(out.log.iterations(), 5);
        assert_eq!(out.log.final_rho(), -1.0);
    }

    #[test]
    fn openloop_one_step_optimum() {
        // max min(x1 - 0.1, 0.3 - x1) is attained at x1 = 0.2.
        let plant = Plant::builtin("integrator2d").unwrap();
        let f = parse("x0 - 0.1 >= 0 && 0.3 - x0 >= 0").unwrap();
        let f = Formula::eventually(1, 1, f);
        let cfg = TrainConfig { max_iters: 3000, fixed_iters: true, ..Default::default() };
        let out = train_openloop(&plant, &f, &[0.0, 0.0], &[vec![0.0, 0.0]], &cfg).unwrap();
        let r = crate::plant::rollout_open_loop(&plant, &[0.0, 0.0], &out.actions, None).unwrap();
        assert!((r.states[1][0] - 0.2).abs() < 1e-3, "{}", r.states[1][0]);
        let none = train_openloop(&plant, &f, &[0.0, 0.0], &[vec![0.4, -0.3]], &TrainConfig { max_iters: 0, fixed_iters: true, ..Default::default() }).unwrap();
        assert_eq!(none.actions, vec![vec![0.4, -0.3]]);
    }

    #[test]
    fn log_csv_layout() {
        let mut log = TrainLog::default();
        log.records.push(IterRecord {
            iter: 1,
            rho: -1.5,
            branch: Branch::Critical,
            lr: 0.25,
            seconds: 0.1,
            s0: 0,
            rho_before: -1.5,
            rho_after: -1.0,
        });
        let csv = log.to_csv();
        assert!(csv.starts_with("iter,rho,branch,lr,seconds\n1,-1.5e0,critical,2.5e-1,"));
        assert_eq!(log.branch_counts()[&Branch::Critical], 1);
    }
}
