//! Conformal verification of a trained controller and Monte-Carlo success rates.
//!
//! With `R_i = -ρ` for `m` i.i.d. rollouts sorted ascending, the probability
//! that a fresh rollout satisfies `R < R_ℓ` is itself `Beta(ℓ, m+1-ℓ)`
//! distributed. When `R_ℓ < 0` that probability lower-bounds the satisfaction
//! probability.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::exec::Execution;
use crate::plant::{rollout, rollout_open_loop, InitialSet, NoiseDraw, NoiseLevel, Plant, PlantError, Rollout};
use crate::policy::Policy;
use crate::stl::{robustness, satisfies, Formula};
use crate::{Error, Result};

/// Closed-loop parameters or a fixed action sequence.
#[derive(Debug, Clone, Copy)]
pub enum Controller<'a> {
    Feedback { policy: &'a Policy, theta: &'a [f64] },
    OpenLoop(&'a [Vec<f64>]),
}

/// A controller deployed on a plant from a box of initial states.
#[derive(Debug, Clone, Copy)]
pub struct Deployment<'a> {
    pub plant: &'a Plant,
    pub controller: Controller<'a>,
    pub formula: &'a Formula,
    pub horizon: usize,
    pub init: &'a InitialSet,
    pub noise: NoiseLevel,
}

impl Deployment<'_> {
    fn validate(&self) -> Result<()> {
        if self.formula.horizon() > self.horizon {
            return Err(Error::Invalid(format!(
                "formula horizon {} exceeds rollout horizon {}",
                self.formula.horizon(),
                self.horizon
            )));
        }
        if let Controller::OpenLoop(a) = self.controller {
            if a.len() < self.horizon {
                return Err(Error::Invalid(format!("{} actions for horizon {}", a.len(), self.horizon)));
            }
        }
        if self.init.low.len() != self.plant.state_dim() {
            return Err(PlantError::Dimension { expected: self.plant.state_dim(), got: self.init.low.len() }.into());
        }
        self.formula.check_dimension(self.plant.state_dim())?;
        Ok(())
    }

    /// Rollout number `i`; its initial state and noise depend only on `(seed, i)`.
    pub fn trial(&self, seed: u64, i: u64) -> Result<Rollout, PlantError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i);
        let s0 = self.init.sample_uniform(&mut rng);
        let noise = (!self.noise.is_zero())
            .then(|| NoiseDraw::sample(self.plant.state_dim(), self.horizon, self.noise.c1, self.noise.c2, &mut rng));
        match self.controller {
            Controller::Feedback { policy, theta } => rollout(self.plant, policy, theta, &s0, self.horizon, noise.as_ref()),
            Controller::OpenLoop(actions) => rollout_open_loop(self.plant, &s0, &actions[..self.horizon], noise.as_ref()),
        }
    }
}

/// Negative robustness values sorted ascending, ties kept in draw order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSet {
    pub values: Vec<f64>,
}

impl CalibrationSet {
    pub fn new(mut values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Invalid("calibration set is empty".into()));
        }
        if values.iter().any(|v| v.is_nan()) {
            return Err(Error::Invalid("calibration value is NaN".into()));
        }
        values.sort_by(f64::total_cmp);
        Ok(Self { values })
    }

    pub fn m(&self) -> usize {
        self.values.len()
    }

    /// `R_ℓ`, 1-based.
    pub fn rank(&self, ell: usize) -> f64 {
        self.values[ell - 1]
    }
}

/// `m` i.i.d. rollouts scored by `-ρ`. A diverged rollout scores `+∞`.
pub fn calibrate(dep: &Deployment<'_>, m: usize, seed: u64, exec: Execution) -> Result<CalibrationSet> {
    if m == 0 {
        return Err(Error::Invalid("m must be at least 1".into()));
    }
    dep.validate()?;
    let values = exec.map_range(m, |i| match dep.trial(seed, i as u64) {
        Ok(r) => -robustness(dep.formula, &r.trace()).expect("validated horizon"),
        Err(_) => f64::INFINITY,
    });
    CalibrationSet::new(values)
}

/// Fraction of rollouts satisfying the formula. Diverged rollouts fail.
pub fn success_rate(dep: &Deployment<'_>, trials: usize, seed: u64, exec: Execution) -> Result<f64> {
    if trials == 0 {
        return Err(Error::Invalid("trials must be at least 1".into()));
    }
    dep.validate()?;
    let ok = exec.map_range(trials, |i| match dep.trial(seed, i as u64) {
        Ok(r) => satisfies(dep.formula, &r.trace()).expect("validated horizon"),
        Err(_) => false,
    });
    Ok(ok.iter().filter(|&&b| b).count() as f64 / trials as f64)
}

fn check_rank(m: usize, ell: usize) -> Result<()> {
    if ell == 0 || ell > m {
        return Err(Error::Invalid(format!("rank {ell} outside 1..={m}")));
    }
    Ok(())
}

/// Mean and variance of `Beta(ℓ, m+1-ℓ)`.
pub fn beta_moments(m: usize, ell: usize) -> Result<(f64, f64)> {
    check_rank(m, ell)?;
    let (l, n) = (ell as f64, m as f64 + 1.0);
    Ok((l / n, l * (n - l) / (n * n * (n + 1.0))))
}

/// `Pr[δ ≥ δ1] = 1 - I_{δ1}(ℓ, m+1-ℓ)`.
pub fn beta_bound(m: usize, ell: usize, delta1: f64) -> Result<f64> {
    check_rank(m, ell)?;
    if !(delta1 > 0.0 && delta1 < 1.0) {
        return Err(Error::Invalid(format!("delta1 = {delta1} outside (0, 1)")));
    }
    let (a, b) = (ell as f64, (m + 1 - ell) as f64);
    Ok(reg_inc_beta_upper(delta1, a, b))
}

/// Smallest rank whose expected coverage reaches `c`: `⌈(m+1)c⌉`.
pub fn choose_ell(m: usize, c: f64) -> Result<usize> {
    if !(c > 0.0 && c < 1.0) {
        return Err(Error::Invalid(format!("coverage {c} outside (0, 1)")));
    }
    let x = (m as f64 + 1.0) * c;
    // Products such as 100 * 0.99 land a few ulps off the integer.
    let r = x.round();
    let ell = if (x - r).abs() <= 1e-9 * x.max(1.0) { r } else { x.ceil() } as usize;
    if ell > m {
        return Err(Error::Invalid(format!("coverage {c} needs rank {ell} but only {m} samples")));
    }
    Ok(ell.max(1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub m: usize,
    pub ell: usize,
    #[serde(rename = "R_ell")]
    pub r_ell: f64,
    pub coverage: f64,
    pub delta1: f64,
    /// `Pr[δ ≥ δ1]`.
    pub confidence: f64,
    pub mean: f64,
    pub variance: f64,
    /// `R_ℓ < 0`.
    pub verdict: bool,
}

pub fn report(cal: &CalibrationSet, coverage: f64, delta1: f64) -> Result<VerificationReport> {
    let m = cal.m();
    let ell = choose_ell(m, coverage)?;
    let (mean, variance) = beta_moments(m, ell)?;
    let r_ell = cal.rank(ell);
    Ok(VerificationReport {
        m,
        ell,
        r_ell,
        coverage,
        delta1,
        confidence: beta_bound(m, ell, delta1)?,
        mean,
        variance,
        verdict: r_ell < 0.0,
    })
}

/// Regularized incomplete Beta `I_x(a, b)`.
pub fn reg_inc_beta(x: f64, a: f64, b: f64) -> f64 {
    1.0 - reg_inc_beta_upper(x, a, b)
}

/// `1 - I_x(a, b)`, computed without cancellation near 1.
fn reg_inc_beta_upper(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if x >= 1.0 {
        return 0.0;
    }
    let front = ln_beta_front(x, a, b).exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        1.0 - front * beta_cf(x, a, b) / a
    } else {
        front * beta_cf(1.0 - x, b, a) / b
    }
}

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// `ln Γ(z)` by the Lanczos approximation, `z > 0`.
pub fn ln_gamma(z: f64) -> f64 {
    const G: f64 = 7.0;
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if z < 0.5 {
        return (std::f64::consts::PI / (std::f64::consts::PI * z).sin()).ln() - ln_gamma(1.0 - z);
    }
    let z = z - 1.0;
    let mut s = C[0];
    for (i, &c) in C.iter().enumerate().skip(1) {
        s += c / (z + i as f64);
    }
    let t = z + G + 0.5;
    HALF_LN_2PI + (z + 0.5) * t.ln() - t + s.ln()
}

/// `ln Γ(z) - ((z - 1/2) ln z - z + ln √(2π))`.
fn stirling_tail(z: f64) -> f64 {
    if z >= 10.0 {
        let r = 1.0 / (z * z);
        (1.0 / 12.0 - r * (1.0 / 360.0 - r * (1.0 / 1260.0 - r / 1680.0))) / z
    } else {
        ln_gamma(z) - ((z - 0.5) * z.ln() - z + HALF_LN_2PI)
    }
}

/// `ln(x^a (1-x)^b / B(a, b))`, arranged so that large `a`, `b` do not cancel.
fn ln_beta_front(x: f64, a: f64, b: f64) -> f64 {
    let d = x * b - (1.0 - x) * a;
    a * (d / a).ln_1p() + b * (-d / b).ln_1p() + 0.5 * (a * b / (a + b)).ln() - HALF_LN_2PI - stirling_tail(a)
        - stirling_tail(b)
        + stirling_tail(a + b)
}

/// Continued fraction for the incomplete Beta function, modified Lentz.
fn beta_cf(x: f64, a: f64, b: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..100_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        d = if d.abs() < TINY { TINY } else { d };
        c = 1.0 + aa / c;
        c = if c.abs() < TINY { TINY } else { c };
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        d = if d.abs() < TINY { TINY } else { d };
        c = 1.0 + aa / c;
        c = if c.abs() < TINY { TINY } else { c };
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-16 {
            break;
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::stl::parse;

    /// `I_x(a, n+1-a) = Σ_{j≥a} C(n, j) x^j (1-x)^(n-j)` for integer parameters.
    fn binomial_tail(x: f64, a: usize, b: usize) -> f64 {
        let n = a + b - 1;
        let mut ln_choose = 0.0;
        let mut sum = 0.0;
        for j in 0..=n {
            if j > 0 {
                ln_choose += ((n + 1 - j) as f64).ln() - (j as f64).ln();
            }
            if j >= a {
                sum += (ln_choose + j as f64 * x.ln() + (n - j) as f64 * (1.0 - x).ln()).exp();
            }
        }
        sum
    }

    #[test]
    fn ln_gamma_at_known_points() {
        assert!(ln_gamma(1.0).abs() < 1e-14);
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-14);
        assert!((ln_gamma(11.0) - 3_628_800f64.ln()).abs() < 1e-12);
        for z in [10.0, 17.3, 250.0] {
            let direct = (z - 0.5) * f64::ln(z) - z + HALF_LN_2PI + stirling_tail(z);
            assert!((direct - ln_gamma(z)).abs() < 1e-12 * ln_gamma(z).abs());
        }
    }

    #[test]
    fn incomplete_beta_matches_binomial_tail() {
        for m in [1usize, 2, 5, 10, 37, 100] {
            for ell in [1, m.div_ceil(3), m.div_ceil(2), m] {
                for x in [1e-3, 0.05, 0.3, 0.5, 0.77, 0.95, 0.999] {
                    let got = 1.0 - beta_bound(m, ell, x).unwrap();
                    let want = binomial_tail(x, ell, m + 1 - ell);
                    assert!((got - want).abs() < 1e-10, "m={m} ell={ell} x={x}: {got} vs {want}");
                }
            }
        }
    }

    #[test]
    fn incomplete_beta_matches_quadrature() {
        let (a, b) = (2.5, 3.5);
        let ln_b = ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b);
        let pdf = |t: f64| ((a - 1.0) * t.ln() + (b - 1.0) * (1.0 - t).ln() - ln_b).exp();
        for x in [0.1, 0.4, 0.62, 0.9] {
            let n = 20_000;
            let h = x / n as f64;
            let mut s = pdf(x);
            for i in 1..n {
                s += if i % 2 == 1 { 4.0 } else { 2.0 } * pdf(i as f64 * h);
            }
            let quad = s * h / 3.0;
            assert!((reg_inc_beta(x, a, b) - quad).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn large_sample_numbers() {
        let ell = choose_ell(100_000, 1.0 - 1e-4).unwrap();
        assert_eq!(ell, 99_991);
        let (mean, var) = beta_moments(100_000, ell).unwrap();
        assert!((mean - 0.9999).abs() < 5e-5);
        assert!((var - 9.9987e-10).abs() < 5e-14, "{var}");
        assert!((beta_bound(100_000, ell, 0.9998).unwrap() - 0.995).abs() < 1e-3);
        assert!((beta_bound(100_000, ell, 0.9999).unwrap() - 0.54).abs() < 1e-2);
    }

    #[test]
    fn rank_rule_and_moments() {
        assert_eq!(choose_ell(9, 0.5).unwrap(), 5);
        assert_eq!(choose_ell(99, 0.99).unwrap(), 99);
        assert!(choose_ell(10, 0.99).is_err());
        assert_eq!(beta_moments(3, 2).unwrap().0, 0.5);
        assert_eq!(beta_moments(1, 1).unwrap(), (0.5, 1.0 / 12.0));
        assert!(beta_moments(3, 0).is_err() && beta_moments(3, 4).is_err());
        assert!(beta_bound(10, 5, 0.0).is_err() && beta_bound(10, 5, 1.0).is_err());
        assert!((beta_bound(10, 5, 1e-12).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rank_coverage_frequency() {
        let (m, ell, reps) = (19, 15, 10_000);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut hits = 0;
        for _ in 0..reps {
            let cal = CalibrationSet::new((0..m).map(|_| rng.random::<f64>()).collect()).unwrap();
            if rng.random::<f64>() < cal.rank(ell) {
                hits += 1;
            }
        }
        let p = ell as f64 / (m + 1) as f64;
        let se = (p * (1.0 - p) / reps as f64).sqrt();
        assert!((hits as f64 / reps as f64 - p).abs() < 3.0 * se);
    }

    fn integrator_deployment<'a>(plant: &'a Plant, f: &'a Formula, init: &'a InitialSet, actions: &'a [Vec<f64>]) -> Deployment<'a> {
        Deployment {
            plant,
            controller: Controller::OpenLoop(actions),
            formula: f,
            horizon: actions.len(),
            init,
            noise: NoiseLevel::default(),
        }
    }

    #[test]
    fn calibration_and_success_rate() {
        let plant = Plant::builtin("integrator2d").unwrap();
        let init = InitialSet { low: vec![0.0, 0.0], high: vec![0.5, 0.5], samples: vec![] };
        let actions = vec![vec![4.0, 0.0]; 5];
        let good = parse("F[0,5](x0 > 0.6)").unwrap();
        let bad = parse("G[0,5](x0 < -1)").unwrap();

        let dep = integrator_deployment(&plant, &good, &init, &actions);
        let cal = calibrate(&dep, 50, 3, Execution::Parallel).unwrap();
        assert!(cal.values.windows(2).all(|w| w[0] <= w[1]) && cal.values.iter().all(|v| *v < 0.0));
        assert_eq!(cal, calibrate(&dep, 50, 3, Execution::Sequential).unwrap());
        assert_eq!(success_rate(&dep, 40, 1, Execution::Parallel).unwrap(), 1.0);
        let rep = report(&cal, 0.9, 0.8).unwrap();
        assert!(rep.verdict && rep.ell == 46 && (0.0..=1.0).contains(&rep.confidence));
        assert_eq!(rep.mean, 46.0 / 51.0);
        assert!(serde_json::to_string(&rep).unwrap().contains("\"R_ell\""));

        let dep = integrator_deployment(&plant, &bad, &init, &actions);
        let cal = calibrate(&dep, 20, 3, Execution::Parallel).unwrap();
        assert!(cal.values.iter().all(|v| *v > 0.0));
        assert!(!report(&cal, 0.5, 0.4).unwrap().verdict);
        assert_eq!(success_rate(&dep, 40, 1, Execution::Parallel).unwrap(), 0.0);
        assert_eq!(calibrate(&dep, 1, 0, Execution::Parallel).unwrap().m(), 1);
        assert!(calibrate(&dep, 0, 0, Execution::Parallel).is_err());
    }

    #[test]
    fn diverged_rollouts_count_as_violations() {
        let plant = Plant::builtin("integrator2d").unwrap();
        let init = InitialSet::singleton(vec![2e9, 0.0]);
        let actions = vec![vec![0.0, 0.0]; 3];
        let f = parse("G[0,3](x0 > 0)").unwrap();
        let dep = integrator_deployment(&plant, &f, &init, &actions);
        assert_eq!(calibrate(&dep, 3, 0, Execution::Parallel).unwrap().values, vec![f64::INFINITY; 3]);
        assert_eq!(success_rate(&dep, 3, 0, Execution::Parallel).unwrap(), 0.0);
    }
}
