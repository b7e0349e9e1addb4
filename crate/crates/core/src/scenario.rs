//! Scenario files: a plant, a specification, a controller shape and the
//! training and verification settings of one experiment.
//!
//! Regions are declared as boxes and referenced from the formula text as
//! `{in:name}` (state inside the box) or `{out:name}` (state outside it).

use std::collections::BTreeMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::plant::{InitialSet, NoiseLevel, Plant};
use crate::policy::{InitScheme, Policy};
use crate::stl::{parse, Formula};
use crate::trainer::{TrainConfig, WaypointPath};

/// A scenario problem, reported with the path of the offending field.
#[derive(Debug, Error, Clone, PartialEq)]
#[error("{path}: {message}")]
pub struct ScenarioError {
    pub path: String,
    pub message: String,
}

fn err<T>(path: impl Into<String>, message: impl fmt::Display) -> Result<T, ScenarioError> {
    Err(ScenarioError { path: path.into(), message: message.to_string() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    /// Critical predicates, waypoints and smooth fallback.
    #[default]
    Dropout,
    /// Plain smooth-robustness ascent.
    Vanilla,
    /// Smooth-robustness ascent over a raw action sequence.
    OpenLoop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleRule {
    /// Every corner of the non-degenerate dimensions plus the center.
    #[default]
    CornersAndCenter,
    Center,
    /// The explicit `samples` list.
    Listed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeInput {
    /// Feed the raw step index.
    Raw,
    /// Feed `k / K`.
    #[default]
    Normalized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantSection {
    pub name: String,
    pub dt: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionSection {
    /// State indices constrained by the box.
    pub dims: Vec<usize>,
    pub low: Vec<f64>,
    pub high: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitSection {
    pub low: Vec<f64>,
    pub high: Vec<f64>,
    #[serde(default)]
    pub rule: SampleRule,
    #[serde(default)]
    pub samples: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySection {
    pub widths: Vec<usize>,
    #[serde(default)]
    pub time: TimeInput,
    #[serde(default)]
    pub init: InitScheme,
    /// Multiplier on randomly initialized parameters.
    #[serde(default = "unit")]
    pub init_gain: f64,
    /// Explicit initial parameters, overriding `init`.
    pub theta0: Option<Vec<f64>>,
}

fn unit() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Knot {
    pub k: usize,
    pub state: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WaypointSection {
    pub mask: Vec<bool>,
    pub knots: Vec<Knot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySection {
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default = "default_coverage")]
    pub coverage: f64,
    /// Coverage level whose confidence is reported; defaults to `coverage`.
    pub delta1: Option<f64>,
    /// Verification box; defaults to the training box.
    pub low: Option<Vec<f64>>,
    pub high: Option<Vec<f64>>,
}

fn default_m() -> usize {
    2000
}

fn default_coverage() -> f64 {
    0.995
}

impl Default for VerifySection {
    fn default() -> Self {
        Self { m: default_m(), coverage: default_coverage(), delta1: None, low: None, high: None }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    #[serde(default)]
    pub c1: f64,
    #[serde(default)]
    pub c2: f64,
    /// Train under this noise as well as deploy under it.
    #[serde(default)]
    pub train: bool,
}

/// The file layout, before validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub seed: Option<u64>,
    pub horizon: usize,
    #[serde(default)]
    pub algorithm: Algorithm,
    pub formula: String,
    pub plant: PlantSection,
    #[serde(default)]
    pub regions: BTreeMap<String, RegionSection>,
    pub init: InitSection,
    pub policy: Option<PolicySection>,
    #[serde(default)]
    pub train: TrainConfig,
    pub waypoints: Option<WaypointSection>,
    #[serde(default)]
    pub verify: VerifySection,
    #[serde(default)]
    pub noise: NoiseSection,
}

/// A validated scenario ready to run.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub description: String,
    pub seed: u64,
    pub horizon: usize,
    pub algorithm: Algorithm,
    pub plant: Plant,
    pub formula: Formula,
    pub init: InitialSet,
    pub policy: Policy,
    pub init_scheme: InitScheme,
    pub init_gain: f64,
    pub theta0: Option<Vec<f64>>,
    pub train: TrainConfig,
    pub waypoints: Option<WaypointPath>,
    pub verify: VerifySection,
    /// Deployment and verification box.
    pub verify_init: InitialSet,
    pub noise: NoiseLevel,
    pub train_with_noise: bool,
    /// The source text; hashed into run manifests.
    pub source: String,
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let file: ScenarioFile = match toml::from_str(text) {
            Ok(f) => f,
            Err(e) => {
                let path = e.span().map(|s| locate(text, s.start)).unwrap_or_else(|| "<file>".into());
                return err(path, e.message());
            }
        };
        Self::from_file(file, text)
    }

    pub fn from_file(f: ScenarioFile, source: &str) -> Result<Self, ScenarioError> {
        let Some(seed) = f.seed else {
            return err("seed", "required; runs must be reproducible");
        };
        if f.horizon == 0 {
            return err("horizon", "must be at least 1");
        }
        let mut plant = match Plant::builtin(&f.plant.name) {
            Ok(p) => p,
            Err(e) => return err("plant.name", e),
        };
        if let Some(dt) = f.plant.dt {
            if !(dt > 0.0 && dt.is_finite()) {
                return err("plant.dt", format!("must be positive, got {dt}"));
            }
            plant = plant.with_dt(dt);
        }
        let n = plant.state_dim();

        for (name, r) in &f.regions {
            let path = format!("regions.{name}");
            if r.dims.is_empty() || r.low.len() != r.dims.len() || r.high.len() != r.dims.len() {
                return err(path, "dims, low and high must be non-empty and of equal length");
            }
            if let Some(&d) = r.dims.iter().find(|&&d| d >= n) {
                return err(format!("{path}.dims"), format!("index {d} out of range for state dimension {n}"));
            }
            if r.low.iter().zip(&r.high).any(|(l, h)| !(l <= h)) {
                return err(format!("{path}.low"), "must not exceed high");
            }
        }
        let text = expand_regions(&f.formula, &f.regions)?;
        let formula = match parse(&text) {
            Ok(fm) => fm,
            Err(e) => return err("formula", e),
        };
        if let Err(e) = formula.check_dimension(n) {
            return err("formula", e);
        }
        if formula.horizon() > f.horizon {
            return err("horizon", format!("formula horizon {} exceeds {}", formula.horizon(), f.horizon));
        }

        let init = build_init(&f.init, n, "init")?;
        let verify_init = match (&f.verify.low, &f.verify.high) {
            (None, None) => init.clone(),
            (Some(low), Some(high)) => {
                let sec = InitSection { low: low.clone(), high: high.clone(), rule: SampleRule::Center, samples: vec![] };
                build_init(&sec, n, "verify")?
            }
            _ => return err("verify", "give both low and high or neither"),
        };
        if f.verify.m == 0 {
            return err("verify.m", "must be at least 1");
        }
        if !(f.verify.coverage > 0.0 && f.verify.coverage < 1.0) {
            return err("verify.coverage", "must lie in (0, 1)");
        }
        if let Some(d) = f.verify.delta1 {
            if !(d > 0.0 && d < 1.0) {
                return err("verify.delta1", "must lie in (0, 1)");
            }
        }

        let (policy, init_scheme) = match (&f.policy, f.algorithm) {
            (Some(p), _) => {
                if p.widths.first() != Some(&(n + 1)) {
                    return err(
                        "policy.widths[0]",
                        format!("must equal state dimension + 1 = {}, got {:?}", n + 1, p.widths.first()),
                    );
                }
                if p.widths.last() != Some(&plant.action_dim()) {
                    return err(
                        format!("policy.widths[{}]", p.widths.len().saturating_sub(1)),
                        format!("must equal action dimension {}", plant.action_dim()),
                    );
                }
                let mut pol = match Policy::new(p.widths.clone()) {
                    Ok(pol) => pol,
                    Err(e) => return err("policy.widths", e),
                };
                if p.time == TimeInput::Normalized {
                    pol = pol.with_normalized_time(f.horizon);
                }
                if !(p.init_gain.is_finite() && p.init_gain > 0.0) {
                    return err("policy.init_gain", "must be positive");
                }
                if let Some(t) = &p.theta0 {
                    if let Err(e) = pol.check_params(t.len()) {
                        return err("policy.theta0", e);
                    }
                }
                (pol, p.init)
            }
            (None, Algorithm::OpenLoop) => (Policy::new(vec![n + 1, plant.action_dim()]).expect("non-zero widths"), InitScheme::Zeros),
            (None, _) => return err("policy", "required for feedback training"),
        };

        let mut train = f.train.clone();
        train.seed = seed;
        if let Err(e) = train.validate() {
            return err("train", e);
        }
        let waypoints = match &f.waypoints {
            None => None,
            Some(w) => Some(build_waypoints(w, n, f.horizon)?),
        };
        for (field, c) in [("noise.c1", f.noise.c1), ("noise.c2", f.noise.c2)] {
            if !(c >= 0.0 && c.is_finite()) {
                return err(field, "must be a non-negative number");
            }
        }
        let noise = NoiseLevel { c1: f.noise.c1, c2: f.noise.c2 };
        if noise.is_zero() && f.noise.train {
            return err("noise.train", "training under noise needs c1 or c2 above zero");
        }
        if f.noise.train {
            train.train_noise = noise;
        }
        Ok(Self {
            name: f.name,
            description: f.description,
            seed,
            horizon: f.horizon,
            algorithm: f.algorithm,
            plant,
            formula,
            init,
            policy,
            init_scheme,
            init_gain: f.policy.as_ref().map_or(1.0, |p| p.init_gain),
            theta0: f.policy.as_ref().and_then(|p| p.theta0.clone()),
            train,
            waypoints,
            verify: f.verify,
            verify_init,
            noise,
            train_with_noise: f.noise.train,
            source: source.to_string(),
        })
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ScenarioError> {
        match std::fs::read_to_string(path) {
            Ok(text) => Self::parse(&text),
            Err(e) => err(path.display().to_string(), e),
        }
    }

    /// Replaces the seed everywhere it is used.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self
    }

    /// Initial controller parameters, drawn from the scenario seed.
    pub fn initial_theta(&self) -> Vec<f64> {
        if let Some(t) = &self.theta0 {
            return t.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut theta = self.policy.init(self.init_scheme, &mut rng);
        theta.iter_mut().for_each(|t| *t *= self.init_gain);
        theta
    }

    /// Hex SHA-256 of the scenario text.
    pub fn hash(&self) -> String {
        Sha256::digest(self.source.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// The center of the initial box, used by open-loop training.
    pub fn nominal_state(&self) -> Vec<f64> {
        self.init.low.iter().zip(&self.init.high).map(|(l, h)| 0.5 * (l + h)).collect()
    }
}

/// `table.key` of the TOML line holding byte `offset`, best effort.
fn locate(text: &str, offset: usize) -> String {
    let mut table = String::new();
    let mut pos = 0;
    for line in text.lines() {
        let end = pos + line.len() + 1;
        let t = line.trim();
        if t.starts_with('[') {
            table = t.trim_matches(|c| c == '[' || c == ']').trim().to_string();
        }
        if offset < end {
            let key = if t.starts_with('[') { None } else { t.split_once('=').map(|(k, _)| k.trim()) };
            return match (table.is_empty(), key) {
                (_, None) if !table.is_empty() => table,
                (true, Some(k)) => k.to_string(),
                (false, Some(k)) => format!("{table}.{k}"),
                _ => "<file>".into(),
            };
        }
        pos = end;
    }
    if table.is_empty() { "<file>".into() } else { table }
}

fn expand_regions(text: &str, regions: &BTreeMap<String, RegionSection>) -> Result<String, ScenarioError> {
    let mut out = String::new();
    let mut rest = text;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let Some(close) = rest[open..].find('}') else {
            return err("formula", "unclosed '{'");
        };
        let body = &rest[open + 1..open + close];
        let Some((kind, name)) = body.split_once(':') else {
            return err("formula", format!("expected {{in:name}} or {{out:name}}, got {{{body}}}"));
        };
        let Some(r) = regions.get(name.trim()) else {
            return err("formula", format!("unknown region '{}'", name.trim()));
        };
        let g = |v: f64| format!("{v:?}");
        let parts: Vec<String> = match kind.trim() {
            "in" => r
                .dims
                .iter()
                .zip(r.low.iter().zip(&r.high))
                .flat_map(|(d, (l, h))| [format!("x{d} >= {}", g(*l)), format!("x{d} <= {}", g(*h))])
                .collect(),
            "out" => r
                .dims
                .iter()
                .zip(r.low.iter().zip(&r.high))
                .flat_map(|(d, (l, h))| [format!("x{d} < {}", g(*l)), format!("x{d} > {}", g(*h))])
                .collect(),
            other => return err("formula", format!("unknown region form '{other}', use in or out")),
        };
        let sep = if kind.trim() == "in" { " && " } else { " || " };
        out.push('(');
        out.push_str(&parts.join(sep));
        out.push(')');
        rest = &rest[open + close + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

fn build_init(sec: &InitSection, n: usize, path: &str) -> Result<InitialSet, ScenarioError> {
    if sec.low.len() != n {
        return err(format!("{path}.low"), format!("needs {n} entries, got {}", sec.low.len()));
    }
    if sec.high.len() != n {
        return err(format!("{path}.high"), format!("needs {n} entries, got {}", sec.high.len()));
    }
    if let Some(i) = (0..n).find(|&i| !(sec.low[i] <= sec.high[i])) {
        return err(format!("{path}.low[{i}]"), "must not exceed high");
    }
    let mut set = InitialSet::corners_and_center(sec.low.clone(), sec.high.clone());
    match sec.rule {
        SampleRule::CornersAndCenter => {}
        SampleRule::Center => set.samples = vec![set.samples.pop().expect("at least one sample")],
        SampleRule::Listed => {
            if sec.samples.is_empty() {
                return err(format!("{path}.samples"), "listed rule needs at least one sample");
            }
            for (i, s) in sec.samples.iter().enumerate() {
                if !set.contains(s) {
                    return err(format!("{path}.samples[{i}]"), "must lie inside the initial box");
                }
            }
            set.samples = sec.samples.clone();
        }
    }
    Ok(set)
}

fn build_waypoints(w: &WaypointSection, n: usize, horizon: usize) -> Result<WaypointPath, ScenarioError> {
    if w.mask.len() != n {
        return err("waypoints.mask", format!("needs {n} entries, got {}", w.mask.len()));
    }
    if w.knots.is_empty() {
        return err("waypoints.knots", "needs at least one knot");
    }
    for (i, k) in w.knots.iter().enumerate() {
        if k.state.len() != n {
            return err(format!("waypoints.knots[{i}].state"), format!("needs {n} entries"));
        }
        if k.k > horizon {
            return err(format!("waypoints.knots[{i}].k"), format!("{} exceeds horizon {horizon}", k.k));
        }
        if i > 0 && k.k <= w.knots[i - 1].k {
            return err(format!("waypoints.knots[{i}].k"), "knot times must increase");
        }
    }
    let knots: Vec<(usize, Vec<f64>)> = w.knots.iter().map(|k| (k.k, k.state.clone())).collect();
    Ok(WaypointPath::interpolate(&knots, w.mask.clone()))
}

/// Scenario files shipped with the crate, by name.
pub const BUNDLED: [(&str, &str); 10] = [
    ("dubins_k10", include_str!("../scenarios/dubins_k10.toml")),
    ("dubins_k50", include_str!("../scenarios/dubins_k50.toml")),
    ("dubins_k100", include_str!("../scenarios/dubins_k100.toml")),
    ("dubins_k500", include_str!("../scenarios/dubins_k500.toml")),
    ("dubins_k1000", include_str!("../scenarios/dubins_k1000.toml")),
    ("multi_dubins_10", include_str!("../scenarios/multi_dubins_10.toml")),
    ("quad6_platform", include_str!("../scenarios/quad6_platform.toml")),
    ("quad12", include_str!("../scenarios/quad12.toml")),
    ("integrator2d", include_str!("../scenarios/integrator2d.toml")),
    ("scalar_fig6", include_str!("../scenarios/scalar_fig6.toml")),
];

pub fn bundled(name: &str) -> Option<Result<Scenario, ScenarioError>> {
    BUNDLED.iter().find(|(n, _)| *n == name).map(|(_, text)| Scenario::parse(text))
}
