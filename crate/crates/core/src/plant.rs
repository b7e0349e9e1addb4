//! Discrete-time plants `s' = s + dt * f(s, squash(a))` and closed-loop rollouts.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::Policy;
use crate::scalar::Scalar;
use crate::stl::Trace;

/// States beyond this magnitude abort the rollout.
pub const DIVERGENCE_LIMIT: f64 = 1e9;

const G: f64 = 9.81;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlantError {
    #[error("unknown plant `{0}`")]
    Unknown(String),
    #[error("rollout diverged at step {step}")]
    Diverged { step: usize },
    #[error("expected {expected} values, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("trace csv: {0}")]
    Csv(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PlantKind {
    /// Unicycles with speed `tanh(0.5 a1) + 1` and heading `a2`, state `(x, y)` per agent.
    Dubins { agents: usize },
    /// Point-mass quadrotor `(x, y, z, vx, vy, vz)` plus platform position `xf`.
    Quad6Platform,
    /// Rigid-body quadrotor with four rotors.
    Quad12,
    /// `s' = s + u dt`, `u = 4 tanh(a / 4)` per axis.
    Integrator2d,
    /// `x' = 0.8 |x|^1.2 - exp(-4 u sin(u)^2)` with `u = tanh(a)`.
    ScalarFig6,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plant {
    pub name: String,
    pub kind: PlantKind,
    pub dt: f64,
}

pub const BUILTIN_PLANTS: [&str; 6] = [
    "dubins",
    "multi_dubins_10",
    "quad6_platform",
    "quad12",
    "integrator2d",
    "scalar_fig6",
];

mod quad12 {
    pub const MASS: f64 = 1.4;
    pub const ARM: f64 = 0.3273;
    pub const JX: f64 = 0.054;
    pub const JY: f64 = 0.054;
    pub const JZ: f64 = 0.104;
    pub const K1: f64 = 0.75 * MASS * super::G;
    pub const K2: f64 = 1.5 * ARM * K1;
}

impl Plant {
    pub fn builtin(name: &str) -> Result<Self, PlantError> {
        let (kind, dt) = match name {
            "dubins" => (PlantKind::Dubins { agents: 1 }, 0.2),
            "multi_dubins_10" => (PlantKind::Dubins { agents: 10 }, 0.26),
            "quad6_platform" => (PlantKind::Quad6Platform, 0.05),
            "quad12" => (PlantKind::Quad12, 0.1),
            "integrator2d" => (PlantKind::Integrator2d, 0.1),
            // A map, not a sampled ODE.
            "scalar_fig6" => (PlantKind::ScalarFig6, 1.0),
            other => return Err(PlantError::Unknown(other.to_string())),
        };
        Ok(Self {
            name: name.to_string(),
            kind,
            dt,
        })
    }

    pub fn with_dt(mut self, dt: f64) -> Self {
        assert!(dt > 0.0 && dt.is_finite(), "sampling time must be positive");
        self.dt = dt;
        self
    }

    pub fn state_dim(&self) -> usize {
        match self.kind {
            PlantKind::Dubins { agents } => 2 * agents,
            PlantKind::Quad6Platform => 7,
            PlantKind::Quad12 => 12,
            PlantKind::Integrator2d => 2,
            PlantKind::ScalarFig6 => 1,
        }
    }

    pub fn action_dim(&self) -> usize {
        match self.kind {
            PlantKind::Dubins { agents } => 2 * agents,
            PlantKind::Quad6Platform | PlantKind::Quad12 => 4,
            PlantKind::Integrator2d => 2,
            PlantKind::ScalarFig6 => 1,
        }
    }

    /// Maps raw network outputs into the admissible input set.
    pub fn squash<S: Scalar>(&self, a: &[S]) -> Vec<S> {
        match self.kind {
            PlantKind::Dubins { agents } => (0..agents)
                .flat_map(|i| [(a[2 * i] * 0.5).tanh() + 1.0, a[2 * i + 1]])
                .collect(),
            PlantKind::Quad6Platform => vec![
                (a[0] * 0.1).tanh() * 0.1,
                (a[1] * 0.1).tanh() * 0.1,
                -((a[2] * 0.1).tanh() * 2.0) + G,
                a[3],
            ],
            PlantKind::Quad12 => a.iter().map(|&ai| ((ai * 0.5).tanh() + 1.0) * 0.5).collect(),
            PlantKind::Integrator2d => a.iter().map(|&ai| (ai / 4.0).tanh() * 4.0).collect(),
            PlantKind::ScalarFig6 => vec![a[0].tanh()],
        }
    }

    /// One step from raw actions.
    pub fn step<S: Scalar>(&self, s: &[S], a_raw: &[S]) -> Vec<S> {
        let u = self.squash(a_raw);
        let dt = self.dt;
        match self.kind {
            PlantKind::Dubins { agents } => {
                let mut next = Vec::with_capacity(2 * agents);
                for i in 0..agents {
                    let (v, th) = (u[2 * i], u[2 * i + 1]);
                    next.push(s[2 * i] + v * th.cos() * dt);
                    next.push(s[2 * i + 1] + v * th.sin() * dt);
                }
                next
            }
            PlantKind::Quad6Platform => {
                let deriv = [
                    s[3],
                    s[4],
                    s[5],
                    u[0].tan() * G,
                    -(u[1].tan() * G),
                    -u[2] + G,
                    u[3],
                ];
                s.iter().zip(deriv).map(|(&x, d)| x + d * dt).collect()
            }
            PlantKind::Quad12 => {
                let d = quad12_derivative(s, &u);
                s.iter().zip(d).map(|(&x, d)| x + d * dt).collect()
            }
            PlantKind::Integrator2d => vec![s[0] + u[0] * dt, s[1] + u[1] * dt],
            PlantKind::ScalarFig6 => {
                let x = s[0];
                let un = u[0];
                let sn = un.sin();
                vec![(x * x).powf(0.6) * 0.8 - (un * (sn * sn) * -4.0).exp()]
            }
        }
    }
}

fn quad12_derivative<S: Scalar>(s: &[S], delta: &[S]) -> Vec<S> {
    use quad12::*;
    let (df, dr, db, dl) = (delta[0], delta[1], delta[2], delta[3]);
    let force = (df + dr + db + dl) * K1;
    let tau_phi = (dl - dr) * (ARM * K1);
    let tau_theta = (df - db) * (ARM * K1);
    let tau_psi = (-df + dr - db + dl) * K2;

    let (x4, x5, x6) = (s[3], s[4], s[5]);
    let (x7, x8, x9) = (s[6], s[7], s[8]);
    let (x10, x11, x12) = (s[9], s[10], s[11]);
    let (s7, c7) = (x7.sin(), x7.cos());
    let (s8, c8) = (x8.sin(), x8.cos());
    let (s9, c9) = (x9.sin(), x9.cos());
    let t8 = s8 / c8;

    vec![
        c8 * c9 * x4 + (s7 * s8 * c9 - c7 * s9) * x5 + (c7 * s8 * c9 + s7 * s9) * x6,
        c8 * s9 * x4 + (s7 * s8 * s9 + c7 * c9) * x5 + (c7 * s8 * s9 - s7 * c9) * x6,
        s8 * x4 - s7 * c8 * x5 - c7 * c8 * x6,
        x12 * x5 - x11 * x6 - s8 * G,
        x10 * x6 - x12 * x4 + c8 * s7 * G,
        x11 * x4 - x10 * x5 + c8 * c7 * G - force / MASS,
        x10 + s7 * t8 * x11 + c7 * t8 * x12,
        c7 * x11 - s7 * x12,
        s7 / c8 * x11 + c7 / c8 * x12,
        -(x11 * x12 * ((JY - JZ) / JX)) + tau_phi / JX,
        x10 * x12 * ((JZ - JX) / JY) + tau_theta / JY,
        tau_psi / JZ,
    ]
}

/// Pre-sampled additive noise: `s_0 += init`, `s_{k+1} += steps[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub init: Vec<f64>,
    pub steps: Vec<Vec<f64>>,
}

impl NoiseDraw {
    /// `c2 * η` on the initial state and `c1 * v_k` on every transition, η and v i.i.d. standard normal.
    pub fn sample<R: Rng + ?Sized>(dim: usize, horizon: usize, c1: f64, c2: f64, rng: &mut R) -> Self {
        let mut normal = |c: f64| -> Vec<f64> {
            (0..dim)
                .map(|_| c * rng.sample::<f64, _>(StandardNormal))
                .collect()
        };
        let init = normal(c2);
        let steps = (0..horizon).map(|_| normal(c1)).collect();
        Self { init, steps }
    }
}

/// Noise magnitudes of the additive model.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NoiseLevel {
    pub c1: f64,
    pub c2: f64,
}

impl NoiseLevel {
    pub fn is_zero(&self) -> bool {
        self.c1 == 0.0 && self.c2 == 0.0
    }
}

/// A closed-loop trajectory: `K + 1` states and the `K` raw actions that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub noise: Option<NoiseDraw>,
}

impl Rollout {
    pub fn horizon(&self) -> usize {
        self.states.len() - 1
    }

    pub fn trace(&self) -> Trace {
        Trace::new(self.states.clone()).expect("rollout states are non-empty and rectangular")
    }

    pub fn to_csv(&self) -> String {
        let n = self.states[0].len();
        let m = self.actions.first().map_or(0, Vec::len);
        let mut out = String::from("k");
        for i in 0..n {
            out.push_str(&format!(",s_{i}"));
        }
        for j in 0..m {
            out.push_str(&format!(",a_{j}"));
        }
        out.push('\n');
        for (k, s) in self.states.iter().enumerate() {
            out.push_str(&k.to_string());
            for x in s {
                out.push_str(&format!(",{x:e}"));
            }
            match self.actions.get(k) {
                Some(a) => a.iter().for_each(|x| out.push_str(&format!(",{x:e}"))),
                None => (0..m).for_each(|_| out.push(',')),
            }
            out.push('\n');
        }
        out
    }

    /// Reads the csv layout written by [`Rollout::to_csv`]; action columns are optional.
    pub fn from_csv(text: &str) -> Result<Self, PlantError> {
        let bad = |msg: String| PlantError::Csv(msg);
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<&str> = lines
            .next()
            .ok_or_else(|| bad("empty file".into()))?
            .split(',')
            .map(str::trim)
            .collect();
        if header.first() != Some(&"k") {
            return Err(bad("first column must be `k`".into()));
        }
        let n = header.iter().filter(|h| h.starts_with("s_")).count();
        let m = header.iter().filter(|h| h.starts_with("a_")).count();
        if n == 0 || header.len() != 1 + n + m {
            return Err(bad(format!("unrecognised header `{}`", header.join(","))));
        }
        let mut states = Vec::new();
        let mut actions = Vec::new();
        for (row, line) in lines.enumerate() {
            let cells: Vec<&str> = line.split(',').map(str::trim).collect();
            if cells.len() != header.len() {
                return Err(bad(format!("row {row} has {} cells, expected {}", cells.len(), header.len())));
            }
            let k: usize = cells[0].parse().map_err(|_| bad(format!("row {row}: bad step `{}`", cells[0])))?;
            if k != row {
                return Err(bad(format!("row {row}: step {k} out of order")));
            }
            let num = |c: &str| c.parse::<f64>().map_err(|_| bad(format!("row {row}: bad number `{c}`")));
            states.push(cells[1..=n].iter().map(|c| num(c)).collect::<Result<Vec<_>, _>>()?);
            let acts = &cells[1 + n..];
            if m > 0 && acts.iter().all(|c| !c.is_empty()) {
                actions.push(acts.iter().map(|c| num(c)).collect::<Result<Vec<_>, _>>()?);
            }
        }
        if states.is_empty() {
            return Err(bad("no rows".into()));
        }
        Ok(Self {
            states,
            actions,
            noise: None,
        })
    }
}

/// A sequence of per-step vectors.
pub type States<S> = Vec<Vec<S>>;

/// Closed-loop rollout over any scalar type.
///
/// `controller(s_k, k)` returns raw actions. Divergence is judged on primal values.
pub fn rollout_generic<S: Scalar>(
    plant: &Plant,
    s0: Vec<S>,
    horizon: usize,
    noise: Option<&NoiseDraw>,
    mut controller: impl FnMut(&[S], usize) -> Vec<S>,
) -> Result<(States<S>, States<S>), PlantError> {
    if s0.len() != plant.state_dim() {
        return Err(PlantError::Dimension {
            expected: plant.state_dim(),
            got: s0.len(),
        });
    }
    let s0 = match noise {
        Some(nd) => s0.iter().zip(&nd.init).map(|(&x, &e)| x + e).collect(),
        None => s0,
    };
    check_finite(&s0, 0)?;
    let mut states = Vec::with_capacity(horizon + 1);
    let mut actions = Vec::with_capacity(horizon);
    states.push(s0);
    for k in 0..horizon {
        let a = controller(&states[k], k);
        let mut next = plant.step(&states[k], &a);
        if let Some(nd) = noise {
            next = next.iter().zip(&nd.steps[k]).map(|(&x, &e)| x + e).collect();
        }
        check_finite(&next, k + 1)?;
        actions.push(a);
        states.push(next);
    }
    Ok((states, actions))
}

fn check_finite<S: Scalar>(s: &[S], step: usize) -> Result<(), PlantError> {
    if s.iter().all(|x| x.value().is_finite() && x.value().abs() <= DIVERGENCE_LIMIT) {
        Ok(())
    } else {
        Err(PlantError::Diverged { step })
    }
}

/// Plain closed-loop rollout under `policy` with parameters `theta`.
pub fn rollout(
    plant: &Plant,
    policy: &Policy,
    theta: &[f64],
    s0: &[f64],
    horizon: usize,
    noise: Option<&NoiseDraw>,
) -> Result<Rollout, PlantError> {
    let (states, actions) =
        rollout_generic(plant, s0.to_vec(), horizon, noise, |s, k| policy.forward(theta, s, k))?;
    Ok(Rollout {
        states,
        actions,
        noise: noise.cloned(),
    })
}

/// Open-loop rollout of a fixed raw action sequence.
pub fn rollout_open_loop(
    plant: &Plant,
    s0: &[f64],
    actions: &[Vec<f64>],
    noise: Option<&NoiseDraw>,
) -> Result<Rollout, PlantError> {
    let (states, actions) = rollout_generic(plant, s0.to_vec(), actions.len(), noise, |_, k| actions[k].clone())?;
    Ok(Rollout {
        states,
        actions,
        noise: noise.cloned(),
    })
}

/// Axis-aligned box of initial states together with the finite training sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialSet {
    pub low: Vec<f64>,
    pub high: Vec<f64>,
    pub samples: Vec<Vec<f64>>,
}

impl InitialSet {
    /// Corners of the non-degenerate dimensions plus the center.
    pub fn corners_and_center(low: Vec<f64>, high: Vec<f64>) -> Self {
        assert_eq!(low.len(), high.len());
        let free: Vec<usize> = (0..low.len()).filter(|&i| high[i] > low[i]).collect();
        let center: Vec<f64> = low.iter().zip(&high).map(|(l, h)| 0.5 * (l + h)).collect();
        let mut samples = Vec::new();
        for mask in 0..(1usize << free.len()) {
            let mut s = center.clone();
            for (bit, &i) in free.iter().enumerate() {
                s[i] = if mask >> bit & 1 == 1 { high[i] } else { low[i] };
            }
            samples.push(s);
        }
        if !free.is_empty() {
            samples.push(center);
        }
        Self { low, high, samples }
    }

    pub fn singleton(s0: Vec<f64>) -> Self {
        Self {
            low: s0.clone(),
            high: s0.clone(),
            samples: vec![s0],
        }
    }

    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.low
            .iter()
            .zip(&self.high)
            .map(|(&l, &h)| if h > l { rng.random_range(l..=h) } else { l })
            .collect()
    }

    pub fn contains(&self, s: &[f64]) -> bool {
        s.len() == self.low.len() && s.iter().zip(self.low.iter().zip(&self.high)).all(|(x, (l, h))| l <= x && x <= h)
    }
}
