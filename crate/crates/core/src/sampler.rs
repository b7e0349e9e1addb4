//! Time sampling and the dropout gradients.
//!
//! A sampled trajectory keeps the controller live only at a few sampled
//! time-steps and replays the reference actions everywhere else, so the tape
//! holds a handful of network evaluations instead of one per step.

use rand::seq::index;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::exec::Execution;
use crate::plant::{rollout_generic, NoiseDraw, Plant, Rollout};
use crate::policy::Policy;
use crate::smooth::{smooth_robustness, SmoothConfig};
use crate::stl::{Formula, Predicate, Trace};
use crate::{Error, Result};

/// Strictly increasing time-steps starting at 0.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TimeSampleSet(Vec<usize>);

impl TimeSampleSet {
    pub fn new(times: Vec<usize>) -> Result<Self> {
        if times.first() != Some(&0) {
            return Err(Error::Invalid("sampled times must start at 0".into()));
        }
        if times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Invalid(format!("sampled times {times:?} are not strictly increasing")));
        }
        Ok(Self(times))
    }

    /// `{0, 1, .., horizon}`
    pub fn full(horizon: usize) -> Self {
        Self((0..=horizon).collect())
    }

    pub fn times(&self) -> &[usize] {
        &self.0
    }

    pub fn last(&self) -> usize {
        *self.0.last().unwrap()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, k: usize) -> bool {
        self.0.binary_search(&k).is_ok()
    }
}

/// Sets of sampled times that share only 0 and together cover `0..=horizon`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimePartition {
    pub horizon: usize,
    pub sets: Vec<TimeSampleSet>,
}

impl TimePartition {
    /// Checks pairwise intersections and the union.
    pub fn is_valid(&self) -> bool {
        let mut seen = vec![0usize; self.horizon + 1];
        for set in &self.sets {
            if set.times().first() != Some(&0) {
                return false;
            }
            for &t in set.times() {
                if t > self.horizon {
                    return false;
                }
                seen[t] += 1;
            }
        }
        seen[0] == self.sets.len() && seen[1..].iter().all(|&c| c == 1)
    }
}

/// `{0, t_1, .., t_{n-1}, k_star}` with the interior drawn uniformly without
/// replacement from `1..k_star`. Returns every step up to `k_star` when there
/// are not enough of them to choose from.
pub fn sample_times_to<R: Rng + ?Sized>(k_star: usize, n: usize, rng: &mut R) -> TimeSampleSet {
    assert!(n >= 1, "need at least one sampled step");
    if k_star <= n {
        return TimeSampleSet::full(k_star);
    }
    let mut times: Vec<usize> = index::sample(rng, k_star - 1, n - 1).into_iter().map(|i| i + 1).collect();
    times.push(0);
    times.push(k_star);
    times.sort_unstable();
    TimeSampleSet(times)
}

/// `{0}` plus `n` distinct steps drawn uniformly from `1..=horizon`.
pub fn sample_times<R: Rng + ?Sized>(horizon: usize, n: usize, rng: &mut R) -> TimeSampleSet {
    let n = n.min(horizon);
    let mut times: Vec<usize> = index::sample(rng, horizon, n).into_iter().map(|i| i + 1).collect();
    times.push(0);
    times.sort_unstable();
    TimeSampleSet(times)
}

/// Deals a random permutation of `1..=horizon` round-robin into `m` sets.
pub fn partition_times<R: Rng + ?Sized>(horizon: usize, m: usize, rng: &mut R) -> Result<TimePartition> {
    if m == 0 || m > horizon {
        return Err(Error::Invalid(format!("cannot split {horizon} time-steps into {m} sets")));
    }
    let mut perm: Vec<usize> = (1..=horizon).collect();
    perm.shuffle(rng);
    let mut sets: Vec<Vec<usize>> = vec![vec![0]; m];
    for (i, t) in perm.into_iter().enumerate() {
        sets[i % m].push(t);
    }
    let sets = sets
        .into_iter()
        .map(|mut s| {
            s.sort_unstable();
            TimeSampleSet(s)
        })
        .collect();
    let p = TimePartition { horizon, sets };
    debug_assert!(p.is_valid());
    Ok(p)
}

/// States of a sampled trajectory at its sampled times.
#[derive(Debug, Clone)]
pub struct SampledTrajectory<'t> {
    pub times: TimeSampleSet,
    pub anchors: Vec<Vec<Var<'t>>>,
}

/// Replays `reference` with the controller live only at `times`.
///
/// Between two sampled steps the recorded actions are constants, so gradients
/// reach `theta` only through the sampled steps. Primal values reproduce the
/// reference states exactly.
pub fn build_sampled<'t>(
    tape: &'t Tape,
    plant: &Plant,
    policy: &Policy,
    theta: &[Var<'t>],
    reference: &Rollout,
    times: &TimeSampleSet,
) -> Result<SampledTrajectory<'t>> {
    if times.last() > reference.horizon() {
        return Err(Error::Invalid(format!(
            "sampled time {} beyond reference horizon {}",
            times.last(),
            reference.horizon()
        )));
    }
    let noise = reference.noise.as_ref();
    let mut x = tape.constants(&reference.states[0]);
    let mut anchors = vec![x.clone()];
    for w in times.times().windows(2) {
        let (t, next) = (w[0], w[1]);
        for k in t..next {
            let a = if k == t {
                policy.forward(theta, &x, k)
            } else {
                tape.constants(&reference.actions[k])
            };
            x = plant.step(&x, &a);
            if let Some(nd) = noise {
                x = x.iter().zip(&nd.steps[k]).map(|(&s, &e)| s + e).collect();
            }
        }
        anchors.push(x.clone());
    }
    Ok(SampledTrajectory {
        times: times.clone(),
        anchors,
    })
}

/// Ascent direction of the critical predicate `h*(s_{k*})` through a sampled
/// trajectory ending at `k*`.
#[allow(clippy::too_many_arguments)]
pub fn grad_critical<R: Rng + ?Sized>(
    plant: &Plant,
    policy: &Policy,
    theta: &[f64],
    reference: &Rollout,
    k_star: usize,
    predicate: &Predicate,
    n: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let times = sample_times_to(k_star, n, rng);
    grad_critical_with(plant, policy, theta, reference, &times, predicate)
}

/// [`grad_critical`] with explicit sampled times ending at the critical step.
pub fn grad_critical_with(
    plant: &Plant,
    policy: &Policy,
    theta: &[f64],
    reference: &Rollout,
    times: &TimeSampleSet,
    predicate: &Predicate,
) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let tv = tape.vars(theta);
    let smpl = build_sampled(&tape, plant, policy, &tv, reference, times)?;
    let j = predicate.eval(smpl.anchors.last().unwrap());
    Ok(tape.backward(j, &tv)?)
}

/// Sum over the partition of the smooth-robustness gradient, each term taken
/// through the sampled trajectory of one set with every other step frozen.
#[allow(clippy::too_many_arguments)]
pub fn grad_smooth(
    plant: &Plant,
    policy: &Policy,
    theta: &[f64],
    reference: &Rollout,
    partition: &TimePartition,
    formula: &Formula,
    cfg: &SmoothConfig,
    exec: Execution,
) -> Result<Vec<f64>> {
    let parts = exec.map(&partition.sets, |set| -> Result<Vec<f64>> {
        let tape = Tape::new();
        let tv = tape.vars(theta);
        let smpl = build_sampled(&tape, plant, policy, &tv, reference, set)?;
        let mut live = smpl.anchors.into_iter();
        let states: Vec<Vec<Var>> = reference
            .states
            .iter()
            .enumerate()
            .map(|(k, s)| {
                if set.contains(k) {
                    live.next().unwrap()
                } else {
                    tape.constants(s)
                }
            })
            .collect();
        let rho = smooth_robustness(formula, &Trace::new(states)?, cfg)?;
        Ok(tape.backward(rho, &tv)?)
    });
    sum_in_order(parts, theta.len())
}

/// Exact gradient of the smooth robustness, split by partition set.
///
/// The rollout is fully live; term `q` only lets the states at the times of
/// set `q` carry gradient. The terms add up to [`smooth_gradient`], which is
/// the decomposition the sampled relaxation starts from.
#[allow(clippy::too_many_arguments)]
pub fn grad_subtrajectories(
    plant: &Plant,
    policy: &Policy,
    theta: &[f64],
    reference: &Rollout,
    partition: &TimePartition,
    formula: &Formula,
    cfg: &SmoothConfig,
) -> Result<Vec<Vec<f64>>> {
    partition
        .sets
        .iter()
        .map(|set| {
            let tape = Tape::new();
            let tv = tape.vars(theta);
            let live = live_rollout(&tape, plant, policy, &tv, reference)?;
            let states: Vec<Vec<Var>> = live
                .into_iter()
                .enumerate()
                .map(|(k, s)| {
                    if set.contains(k) {
                        s
                    } else {
                        tape.constants(&reference.states[k])
                    }
                })
                .collect();
            let rho = smooth_robustness(formula, &Trace::new(states)?, cfg)?;
            Ok(tape.backward(rho, &tv)?)
        })
        .collect()
}

/// Smooth robustness and its exact gradient through a fully live rollout
/// that replays the reference's initial state and noise.
pub fn smooth_gradient(
    plant: &Plant,
    policy: &Policy,
    theta: &[f64],
    reference: &Rollout,
    formula: &Formula,
    cfg: &SmoothConfig,
) -> Result<(f64, Vec<f64>)> {
    let tape = Tape::new();
    let tv = tape.vars(theta);
    let states = live_rollout(&tape, plant, policy, &tv, reference)?;
    let rho = smooth_robustness(formula, &Trace::new(states)?, cfg)?;
    Ok((rho.value(), tape.backward(rho, &tv)?))
}

fn live_rollout<'t>(
    tape: &'t Tape,
    plant: &Plant,
    policy: &Policy,
    theta: &[Var<'t>],
    reference: &Rollout,
) -> Result<Vec<Vec<Var<'t>>>> {
    // The reference's first state already carries its initial perturbation.
    let noise = reference.noise.as_ref().map(|nd| NoiseDraw {
        init: vec![0.0; nd.init.len()],
        steps: nd.steps.clone(),
    });
    let s0 = tape.constants(&reference.states[0]);
    let (states, _) = rollout_generic(plant, s0, reference.horizon(), noise.as_ref(), |s, k| {
        policy.forward(theta, s, k)
    })?;
    Ok(states)
}

fn sum_in_order(parts: Vec<Result<Vec<f64>>>, len: usize) -> Result<Vec<f64>> {
    let mut total = vec![0.0; len];
    for p in parts {
        for (t, g) in total.iter_mut().zip(p?) {
            *t += g;
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn times_to_critical_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_times_to(0, 3, &mut rng).times(), &[0]);
        assert_eq!(sample_times_to(3, 3, &mut rng).times(), &[0, 1, 2, 3]);
        for _ in 0..50 {
            let t = sample_times_to(3, 2, &mut rng);
            assert_eq!(t.len(), 3);
            assert!(matches!(t.times(), [0, 1 | 2, 3]));
        }
        let t = sample_times_to(40, 5, &mut rng);
        assert_eq!((t.len(), t.last()), (6, 40));
    }

    #[test]
    fn interior_times_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut counts = [0usize; 10];
        let draws = 10_000;
        for _ in 0..draws {
            for &t in &sample_times_to(9, 3, &mut rng).times()[1..3] {
                counts[t] += 1;
            }
        }
        for &c in &counts[1..9] {
            // two interior points out of eight candidates
            assert!((c as f64 / draws as f64 - 0.25).abs() < 0.02, "{counts:?}");
        }
    }

    #[test]
    fn partition_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = partition_times(9, 3, &mut rng).unwrap();
        assert!(p.is_valid());
        assert!(p.sets.iter().all(|s| s.len() == 4));
        let mut sizes: Vec<usize> = partition_times(4, 3, &mut rng).unwrap().sets.iter().map(|s| s.len()).collect();
        sizes.sort();
        assert_eq!(sizes, vec![2, 2, 3]);
        assert_eq!(partition_times(6, 1, &mut rng).unwrap().sets[0], TimeSampleSet::full(6));
        assert!(partition_times(3, 4, &mut rng).is_err());
        assert!(partition_times(3, 0, &mut rng).is_err());
    }

    #[test]
    fn consecutive_draws_differ() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let draws: HashSet<Vec<usize>> = (0..5).map(|_| sample_times(100, 5, &mut rng).times().to_vec()).collect();
        assert!(draws.len() > 1);
    }

    fn scalar_setup() -> (Plant, Policy, Vec<f64>) {
        let plant = Plant::builtin("integrator2d").unwrap();
        let policy = Policy::new(vec![3, 4, 2]).unwrap();
        let theta = policy.init(crate::policy::InitScheme::Xavier, &mut ChaCha8Rng::seed_from_u64(9));
        (plant, policy, theta)
    }

    #[test]
    fn anchors_reproduce_the_reference() {
        let (plant, policy, theta) = scalar_setup();
        let reference = crate::plant::rollout(&plant, &policy, &theta, &[-1.0, -1.0], 12, None).unwrap();
        let tape = Tape::new();
        let tv = tape.vars(&theta);
        let times = TimeSampleSet::new(vec![0, 1, 3, 6, 12]).unwrap();
        let smpl = build_sampled(&tape, &plant, &policy, &tv, &reference, &times).unwrap();
        for (&t, a) in times.times().iter().zip(&smpl.anchors) {
            let vals: Vec<f64> = a.iter().map(|v| v.value()).collect();
            assert_eq!(vals, reference.states[t]);
        }
    }

    #[test]
    fn frozen_steps_use_recorded_actions() {
        // The worked example: x3 = f(F(x1, 1), a2) and x6 = f(f(F(x3, 3), a4), a5).
        let plant = Plant::builtin("integrator2d").unwrap();
        let policy = Policy::new(vec![3, 2]).unwrap();
        let theta = vec![0.0; policy.param_count()];
        let actions: Vec<Vec<f64>> = (0..9).map(|k| vec![0.1 * k as f64, 0.0]).collect();
        let reference = crate::plant::rollout_open_loop(&plant, &[0.0, 0.0], &actions, None).unwrap();
        let tape = Tape::new();
        let tv = tape.vars(&theta);
        let times = TimeSampleSet::new(vec![0, 1, 3, 6]).unwrap();
        let smpl = build_sampled(&tape, &plant, &policy, &tv, &reference, &times).unwrap();
        let f = |x: f64, a: f64| plant.step(&[x, 0.0], &[a, 0.0])[0];
        let x1 = reference.states[1][0];
        let x3 = f(f(x1, 0.0), 0.2);
        let x6 = f(f(f(x3, 0.0), 0.4), 0.5);
        assert_eq!(smpl.anchors[2][0].value(), x3);
        assert_eq!(smpl.anchors[3][0].value(), x6);
    }

    #[test]
    fn critical_gradient_with_full_sampling_matches_finite_differences() {
        let (plant, policy, theta) = scalar_setup();
        let s0 = [-1.0, -1.0];
        let pred = Predicate::affine(vec![(0, 1.0), (1, -0.5)], 0.2, true);
        let k_star = 7;
        let reference = crate::plant::rollout(&plant, &policy, &theta, &s0, 10, None).unwrap();
        let g = grad_critical_with(&plant, &policy, &theta, &reference, &TimeSampleSet::full(k_star), &pred).unwrap();
        let j = |th: &[f64]| {
            let r = crate::plant::rollout(&plant, &policy, th, &s0, 10, None).unwrap();
            pred.eval(&r.states[k_star])
        };
        for i in 0..theta.len() {
            let mut hi = theta.clone();
            let mut lo = theta.clone();
            hi[i] += 1e-6;
            lo[i] -= 1e-6;
            let fd = (j(&hi) - j(&lo)) / 2e-6;
            assert!((fd - g[i]).abs() <= 1e-4 * fd.abs().max(1e-3), "{i}: {fd} vs {}", g[i]);
        }
        let g0 = grad_critical_with(&plant, &policy, &theta, &reference, &TimeSampleSet::full(0), &pred).unwrap();
        assert!(g0.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn smooth_gradient_decomposes_over_partitions() {
        let (plant, policy, theta) = scalar_setup();
        let f = crate::stl::parse("F[0,8](x0 > 0.5) && G[0,9](x1 < 1)").unwrap();
        let cfg = SmoothConfig { b: 5.0 };
        let reference = crate::plant::rollout(&plant, &policy, &theta, &[-1.0, -1.0], 9, None).unwrap();
        let (_, full) = smooth_gradient(&plant, &policy, &theta, &reference, &f, &cfg).unwrap();
        let part = partition_times(9, 3, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let terms = grad_subtrajectories(&plant, &policy, &theta, &reference, &part, &f, &cfg).unwrap();
        for i in 0..theta.len() {
            let s: f64 = terms.iter().map(|t| t[i]).sum();
            assert!((s - full[i]).abs() < 1e-8, "{i}: {s} vs {}", full[i]);
        }
        // With a single set nothing is frozen.
        let one = partition_times(9, 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let g = grad_smooth(&plant, &policy, &theta, &reference, &one, &f, &cfg, Execution::Sequential).unwrap();
        for i in 0..theta.len() {
            assert!((g[i] - full[i]).abs() <= 1e-10 * full[i].abs().max(1.0));
        }
    }

    #[test]
    fn parallel_and_sequential_sums_match() {
        let (plant, policy, theta) = scalar_setup();
        let f = crate::stl::parse("F[0,20](x0 > 0.5)").unwrap();
        let reference = crate::plant::rollout(&plant, &policy, &theta, &[-1.0, -1.0], 20, None).unwrap();
        let part = partition_times(20, 4, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let cfg = SmoothConfig::default();
        let a = grad_smooth(&plant, &policy, &theta, &reference, &part, &f, &cfg, Execution::Sequential).unwrap();
        let b = grad_smooth(&plant, &policy, &theta, &reference, &part, &f, &cfg, Execution::Parallel).unwrap();
        assert_eq!(a, b);
    }
}
