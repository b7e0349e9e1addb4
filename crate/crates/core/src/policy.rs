//! Feedforward tanh controller `a_k = π_θ(s_k, k)` and the Adam update.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("parameter vector has length {got}, widths {widths:?} need {expected}")]
    ParamCount {
        widths: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("non-finite gradient component at index {0}")]
    NonFiniteGradient(usize),
    #[error("invalid widths {0:?}: need at least an input and an output layer, all non-zero")]
    Widths(Vec<usize>),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Fully connected network with tanh hidden layers and a linear output.
///
/// Parameters are laid out layer by layer; within a layer the weight matrix is
/// row-major (one row per output unit) followed by the bias vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub widths: Vec<usize>,
    /// Multiplier applied to the time-step before it enters the network.
    /// `1.0` feeds the raw index.
    #[serde(default = "one")]
    pub time_scale: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    #[default]
    Xavier,
    Zeros,
}

impl Policy {
    pub fn new(widths: Vec<usize>) -> Result<Self, PolicyError> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(PolicyError::Widths(widths));
        }
        Ok(Self {
            widths,
            time_scale: 1.0,
        })
    }

    /// Feed `k / horizon` instead of the raw time-step.
    pub fn with_normalized_time(mut self, horizon: usize) -> Self {
        self.time_scale = 1.0 / horizon.max(1) as f64;
        self
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[1] * (w[0] + 1)).sum()
    }

    pub fn check_params(&self, theta_len: usize) -> Result<(), PolicyError> {
        let expected = self.param_count();
        if theta_len == expected {
            Ok(())
        } else {
            Err(PolicyError::ParamCount {
                widths: self.widths.clone(),
                expected,
                got: theta_len,
            })
        }
    }

    /// Raw actions for state `s` at time-step `k`. The input is `[s, k * time_scale]`.
    pub fn forward<S: Scalar>(&self, theta: &[S], s: &[S], k: usize) -> Vec<S> {
        debug_assert_eq!(theta.len(), self.param_count());
        debug_assert_eq!(s.len() + 1, self.input_dim());
        let mut x: Vec<S> = s.to_vec();
        x.push(s[0].lift(k as f64 * self.time_scale));
        let mut offset = 0;
        let layers = self.widths.len() - 1;
        for (l, w) in self.widths.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            let weights = &theta[offset..offset + n_in * n_out];
            let bias = &theta[offset + n_in * n_out..offset + n_in * n_out + n_out];
            offset += n_out * (n_in + 1);
            x = (0..n_out)
                .map(|j| {
                    let row = &weights[j * n_in..(j + 1) * n_in];
                    let mut acc = bias[j];
                    for (&wi, &xi) in row.iter().zip(&x) {
                        acc = acc + wi * xi;
                    }
                    if l + 1 < layers {
                        acc.tanh()
                    } else {
                        acc
                    }
                })
                .collect();
        }
        x
    }

    pub fn init<R: Rng + ?Sized>(&self, scheme: InitScheme, rng: &mut R) -> Vec<f64> {
        let mut theta = Vec::with_capacity(self.param_count());
        for w in self.widths.windows(2) {
            let (n_in, n_out) = (w[0], w[1]);
            let limit = (6.0 / (n_in + n_out) as f64).sqrt();
            for _ in 0..n_in * n_out {
                theta.push(match scheme {
                    InitScheme::Xavier => rng.random_range(-limit..limit),
                    InitScheme::Zeros => 0.0,
                });
            }
            theta.extend(std::iter::repeat_n(0.0, n_out));
        }
        theta
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for gradient ascent.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self {
            config,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    /// `θ ← θ + step(g)`, moving along the ascent direction `g`.
    /// A non-finite `g` leaves both `θ` and the state untouched.
    pub fn update(&mut self, theta: &mut [f64], g: &[f64]) -> Result<(), PolicyError> {
        assert_eq!(theta.len(), self.m.len());
        assert_eq!(g.len(), self.m.len());
        if let Some(i) = g.iter().position(|x| !x.is_finite()) {
            return Err(PolicyError::NonFiniteGradient(i));
        }
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        self.t += 1;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for i in 0..theta.len() {
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g[i];
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g[i] * g[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            theta[i] += lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

/// Serialized controller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub widths: Vec<usize>,
    #[serde(default = "one")]
    pub time_scale: f64,
    pub activation: String,
    pub plant: String,
    pub theta: Vec<f64>,
    #[serde(default)]
    pub metadata: serde_json::Map<String, serde_json::Value>,
}

impl Checkpoint {
    pub fn new(policy: &Policy, plant: &str, theta: Vec<f64>) -> Self {
        Self {
            widths: policy.widths.clone(),
            time_scale: policy.time_scale,
            activation: "tanh".into(),
            plant: plant.into(),
            theta,
            metadata: Default::default(),
        }
    }

    pub fn policy(&self) -> Result<Policy, PolicyError> {
        if self.activation != "tanh" {
            return Err(PolicyError::Checkpoint(format!("unsupported activation `{}`", self.activation)));
        }
        let mut p = Policy::new(self.widths.clone())?;
        p.time_scale = self.time_scale;
        p.check_params(self.theta.len())?;
        Ok(p)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, PolicyError> {
        let c: Self = serde_json::from_str(text).map_err(|e| PolicyError::Checkpoint(e.to_string()))?;
        c.policy()?;
        Ok(c)
    }
}
