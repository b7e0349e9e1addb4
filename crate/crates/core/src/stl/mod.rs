//! Discrete-time STL in positive normal form.
//!
//! Formulas are built by [`parse`] (or directly through the constructors) and
//! evaluated with [`robustness`], [`satisfies`] and [`critical`]. Negation is
//! not a node of the tree: it is pushed onto predicates while parsing.

mod parser;
mod semantics;

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::autodiff::Var;
use crate::scalar::Scalar;

pub use parser::{parse, parse_with, ParseError};
pub use semantics::{critical, holds, robustness, robustness_at, satisfies, CriticalWitness};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StlError {
    #[error("trace too short: formula needs step {needed}, trace ends at step {horizon}")]
    TraceTooShort { needed: usize, horizon: usize },
    #[error("predicate reads state dimension {index} but states have dimension {dim}")]
    DimensionMismatch { index: usize, dim: usize },
    #[error("invalid trace: {0}")]
    InvalidTrace(String),
}

/// A differentiable scalar function of the state, registered by name.
pub trait NamedPredicate: Send + Sync {
    fn eval(&self, state: &[f64]) -> f64;
    fn eval_var<'t>(&self, state: &[Var<'t>]) -> Var<'t>;
}

/// Dispatch from a generic scalar to the right [`NamedPredicate`] method.
pub trait EvalNamed: Scalar {
    fn eval_named(f: &dyn NamedPredicate, state: &[Self]) -> Self;
}

impl EvalNamed for f64 {
    fn eval_named(f: &dyn NamedPredicate, state: &[f64]) -> f64 {
        f.eval(state)
    }
}

impl<'t> EvalNamed for Var<'t> {
    fn eval_named(f: &dyn NamedPredicate, state: &[Var<'t>]) -> Var<'t> {
        f.eval_var(state)
    }
}

#[derive(Clone)]
struct RegistryEntry {
    func: Arc<dyn NamedPredicate>,
    negation: Option<String>,
}

/// Named predicates available to the parser via `pred(name)`.
#[derive(Clone, Default)]
pub struct PredicateRegistry {
    entries: HashMap<String, RegistryEntry>,
}

impl PredicateRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, func: Arc<dyn NamedPredicate>) {
        self.entries.insert(
            name.to_string(),
            RegistryEntry {
                func,
                negation: None,
            },
        );
    }

    /// Registers `name` and `negated` as each other's negation.
    pub fn register_pair(
        &mut self,
        name: &str,
        func: Arc<dyn NamedPredicate>,
        negated: &str,
        negated_func: Arc<dyn NamedPredicate>,
    ) {
        self.entries.insert(
            name.to_string(),
            RegistryEntry {
                func,
                negation: Some(negated.to_string()),
            },
        );
        self.entries.insert(
            negated.to_string(),
            RegistryEntry {
                func: negated_func,
                negation: Some(name.to_string()),
            },
        );
    }

    fn get(&self, name: &str) -> Option<&RegistryEntry> {
        self.entries.get(name)
    }
}

/// The function `h` of a predicate `h(s) > 0` (or `>= 0`).
#[derive(Clone)]
pub enum PredicateFn {
    /// `h(s) = offset + Σ coeff · s[index]`.
    Affine {
        terms: Vec<(usize, f64)>,
        offset: f64,
    },
    Named {
        name: String,
        func: Arc<dyn NamedPredicate>,
    },
}

impl PartialEq for PredicateFn {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (
                PredicateFn::Affine { terms, offset },
                PredicateFn::Affine {
                    terms: t2,
                    offset: o2,
                },
            ) => terms == t2 && offset == o2,
            (PredicateFn::Named { name, .. }, PredicateFn::Named { name: n2, .. }) => name == n2,
            _ => false,
        }
    }
}

impl fmt::Debug for PredicateFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PredicateFn::Affine { terms, offset } => f
                .debug_struct("Affine")
                .field("terms", terms)
                .field("offset", offset)
                .finish(),
            PredicateFn::Named { name, .. } => f.debug_tuple("Named").field(name).finish(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Predicate {
    pub func: PredicateFn,
    /// `h > 0` when true, `h >= 0` otherwise. Only Boolean semantics at
    /// exactly zero depend on it.
    pub strict: bool,
}

impl Predicate {
    pub fn affine(terms: Vec<(usize, f64)>, offset: f64, strict: bool) -> Self {
        Self {
            func: PredicateFn::Affine { terms, offset },
            strict,
        }
    }

    /// `s[index] > threshold`
    pub fn above(index: usize, threshold: f64) -> Self {
        Self::affine(vec![(index, 1.0)], -threshold, true)
    }

    /// `s[index] < threshold`
    pub fn below(index: usize, threshold: f64) -> Self {
        Self::affine(vec![(index, -1.0)], threshold, true)
    }

    pub fn eval<S: EvalNamed>(&self, state: &[S]) -> S {
        match &self.func {
            PredicateFn::Affine { terms, offset } => {
                let mut acc = state[0].lift(*offset);
                for &(i, c) in terms {
                    acc = acc + state[i] * c;
                }
                acc
            }
            PredicateFn::Named { func, .. } => S::eval_named(func.as_ref(), state),
        }
    }

    /// Dense weight vector of an affine predicate for a state of dimension `dim`.
    pub fn dense_weights(&self, dim: usize) -> Option<(Vec<f64>, f64)> {
        match &self.func {
            PredicateFn::Affine { terms, offset } => {
                let mut w = vec![0.0; dim];
                for &(i, c) in terms {
                    if i < dim {
                        w[i] += c;
                    }
                }
                Some((w, *offset))
            }
            PredicateFn::Named { .. } => None,
        }
    }

    fn max_index(&self) -> Option<usize> {
        match &self.func {
            PredicateFn::Affine { terms, .. } => terms.iter().map(|t| t.0).max(),
            PredicateFn::Named { .. } => None,
        }
    }
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let cmp = if self.strict { ">" } else { ">=" };
        match &self.func {
            PredicateFn::Affine { terms, offset } => {
                // Signs are folded into the operators so the text parses back.
                let signed = |f: &mut fmt::Formatter<'_>, first: bool, c: f64| -> fmt::Result {
                    match (first, c < 0.0) {
                        (true, true) => f.write_str("-"),
                        (true, false) => Ok(()),
                        (false, true) => f.write_str(" - "),
                        (false, false) => f.write_str(" + "),
                    }
                };
                for (n, &(i, c)) in terms.iter().enumerate() {
                    signed(f, n == 0, c)?;
                    write!(f, "{}*x{i}", c.abs())?;
                }
                if terms.is_empty() || *offset != 0.0 {
                    signed(f, terms.is_empty(), *offset)?;
                    write!(f, "{}", offset.abs())?;
                }
                write!(f, " {cmp} 0")
            }
            PredicateFn::Named { name, .. } => write!(f, "pred({name}) {cmp} 0"),
        }
    }
}

/// Bounded integer interval `[lo, hi]` of time-steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interval {
    pub lo: usize,
    pub hi: usize,
}

impl Interval {
    pub fn new(lo: usize, hi: usize) -> Self {
        assert!(lo <= hi, "interval [{lo}, {hi}] is empty");
        Self { lo, hi }
    }

    pub fn width(&self) -> usize {
        self.hi - self.lo + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Formula {
    Pred(Predicate),
    And(Vec<Formula>),
    Or(Vec<Formula>),
    Eventually(Interval, Box<Formula>),
    Always(Interval, Box<Formula>),
    Until(Interval, Box<Formula>, Box<Formula>),
    Release(Interval, Box<Formula>, Box<Formula>),
}

impl Formula {
    pub fn pred(p: Predicate) -> Self {
        Formula::Pred(p)
    }

    pub fn and(children: Vec<Formula>) -> Self {
        assert!(!children.is_empty());
        Formula::And(children)
    }

    pub fn or(children: Vec<Formula>) -> Self {
        assert!(!children.is_empty());
        Formula::Or(children)
    }

    pub fn eventually(lo: usize, hi: usize, child: Formula) -> Self {
        Formula::Eventually(Interval::new(lo, hi), Box::new(child))
    }

    pub fn always(lo: usize, hi: usize, child: Formula) -> Self {
        Formula::Always(Interval::new(lo, hi), Box::new(child))
    }

    pub fn until(lo: usize, hi: usize, lhs: Formula, rhs: Formula) -> Self {
        Formula::Until(Interval::new(lo, hi), Box::new(lhs), Box::new(rhs))
    }

    pub fn release(lo: usize, hi: usize, lhs: Formula, rhs: Formula) -> Self {
        Formula::Release(Interval::new(lo, hi), Box::new(lhs), Box::new(rhs))
    }

    /// Last time-step read when evaluating at time 0.
    pub fn horizon(&self) -> usize {
        match self {
            Formula::Pred(_) => 0,
            Formula::And(cs) | Formula::Or(cs) => cs.iter().map(Formula::horizon).max().unwrap_or(0),
            Formula::Eventually(i, c) | Formula::Always(i, c) => i.hi + c.horizon(),
            Formula::Until(i, l, r) | Formula::Release(i, l, r) => i.hi + l.horizon().max(r.horizon()),
        }
    }

    /// Every predicate in left-to-right order.
    pub fn predicates(&self) -> Vec<&Predicate> {
        let mut out = Vec::new();
        self.collect_predicates(&mut out);
        out
    }

    fn collect_predicates<'f>(&'f self, out: &mut Vec<&'f Predicate>) {
        match self {
            Formula::Pred(p) => out.push(p),
            Formula::And(cs) | Formula::Or(cs) => cs.iter().for_each(|c| c.collect_predicates(out)),
            Formula::Eventually(_, c) | Formula::Always(_, c) => c.collect_predicates(out),
            Formula::Until(_, l, r) | Formula::Release(_, l, r) => {
                l.collect_predicates(out);
                r.collect_predicates(out);
            }
        }
    }

    /// Checks that affine predicates only read dimensions below `dim`.
    pub fn check_dimension(&self, dim: usize) -> Result<(), StlError> {
        for p in self.predicates() {
            if let Some(index) = p.max_index() {
                if index >= dim {
                    return Err(StlError::DimensionMismatch { index, dim });
                }
            }
        }
        Ok(())
    }

    /// Positive-normal-form negation (De Morgan plus the U/R duality).
    pub fn negate(&self, registry: &PredicateRegistry) -> Result<Formula, NegationError> {
        Ok(match self {
            Formula::Pred(p) => Formula::Pred(negate_predicate(p, registry)?),
            Formula::And(cs) => Formula::Or(cs.iter().map(|c| c.negate(registry)).collect::<Result<_, _>>()?),
            Formula::Or(cs) => Formula::And(cs.iter().map(|c| c.negate(registry)).collect::<Result<_, _>>()?),
            Formula::Eventually(i, c) => Formula::Always(*i, Box::new(c.negate(registry)?)),
            Formula::Always(i, c) => Formula::Eventually(*i, Box::new(c.negate(registry)?)),
            Formula::Until(i, l, r) => {
                Formula::Release(*i, Box::new(l.negate(registry)?), Box::new(r.negate(registry)?))
            }
            Formula::Release(i, l, r) => {
                Formula::Until(*i, Box::new(l.negate(registry)?), Box::new(r.negate(registry)?))
            }
        })
    }
}

impl fmt::Display for Formula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |f: &mut fmt::Formatter<'_>, cs: &[Formula], sep: &str| -> fmt::Result {
            for (n, c) in cs.iter().enumerate() {
                if n > 0 {
                    f.write_str(sep)?;
                }
                write!(f, "({c})")?;
            }
            Ok(())
        };
        match self {
            Formula::Pred(p) => write!(f, "{p}"),
            Formula::And(cs) => join(f, cs, " && "),
            Formula::Or(cs) => join(f, cs, " || "),
            Formula::Eventually(i, c) => write!(f, "F[{},{}]({c})", i.lo, i.hi),
            Formula::Always(i, c) => write!(f, "G[{},{}]({c})", i.lo, i.hi),
            Formula::Until(i, l, r) => write!(f, "U[{},{}]({l}, {r})", i.lo, i.hi),
            Formula::Release(i, l, r) => write!(f, "R[{},{}]({l}, {r})", i.lo, i.hi),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("negation of named predicate `{0}` has no registered counterpart")]
pub struct NegationError(pub String);

fn negate_predicate(p: &Predicate, registry: &PredicateRegistry) -> Result<Predicate, NegationError> {
    let func = match &p.func {
        PredicateFn::Affine { terms, offset } => PredicateFn::Affine {
            terms: terms.iter().map(|&(i, c)| (i, -c)).collect(),
            offset: -offset,
        },
        PredicateFn::Named { name, .. } => {
            let negated = registry
                .get(name)
                .and_then(|e| e.negation.clone())
                .ok_or_else(|| NegationError(name.clone()))?;
            let entry = registry.get(&negated).ok_or_else(|| NegationError(name.clone()))?;
            PredicateFn::Named {
                name: negated,
                func: entry.func.clone(),
            }
        }
    };
    Ok(Predicate {
        func,
        strict: !p.strict,
    })
}

/// A finite sequence of states `s_0 .. s_K`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace<S = f64> {
    states: Vec<Vec<S>>,
}

impl<S: Copy> Trace<S> {
    pub fn new(states: Vec<Vec<S>>) -> Result<Self, StlError> {
        let dim = states
            .first()
            .map(Vec::len)
            .ok_or_else(|| StlError::InvalidTrace("no states".into()))?;
        if dim == 0 {
            return Err(StlError::InvalidTrace("zero-dimensional states".into()));
        }
        if let Some(k) = states.iter().position(|s| s.len() != dim) {
            return Err(StlError::InvalidTrace(format!(
                "state {k} has dimension {}, expected {dim}",
                states[k].len()
            )));
        }
        Ok(Self { states })
    }

    /// One-dimensional trace from scalar samples.
    pub fn scalar(values: &[S]) -> Result<Self, StlError> {
        Self::new(values.iter().map(|&v| vec![v]).collect())
    }

    pub fn dim(&self) -> usize {
        self.states[0].len()
    }

    /// Index of the last state.
    pub fn horizon(&self) -> usize {
        self.states.len() - 1
    }

    pub fn state(&self, k: usize) -> &[S] {
        &self.states[k]
    }

    pub fn states(&self) -> &[Vec<S>] {
        &self.states
    }
}

/// Random single-variable formula for oracle tests.
#[cfg(test)]
pub(crate) fn random_formula(rng: &mut rand_chacha::ChaCha8Rng, depth: usize) -> Formula {
    use rand::Rng;
    let leaf = depth == 0 || rng.random_bool(0.25);
    if leaf {
        let c = rng.random_range(-1.0..1.0);
        let coeff = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        return Formula::pred(Predicate::affine(vec![(0, coeff)], c, rng.random_bool(0.5)));
    }
    fn iv(rng: &mut rand_chacha::ChaCha8Rng) -> (usize, usize) {
        let lo = rng.random_range(0..3);
        (lo, lo + rng.random_range(0..3))
    }
    match rng.random_range(0..6) {
        0 => Formula::and((0..rng.random_range(1..4)).map(|_| random_formula(rng, depth - 1)).collect()),
        1 => Formula::or((0..rng.random_range(1..4)).map(|_| random_formula(rng, depth - 1)).collect()),
        2 => {
            let (a, b) = iv(rng);
            Formula::eventually(a, b, random_formula(rng, depth - 1))
        }
        3 => {
            let (a, b) = iv(rng);
            Formula::always(a, b, random_formula(rng, depth - 1))
        }
        4 => {
            let (a, b) = iv(rng);
            Formula::until(a, b, random_formula(rng, depth - 1), random_formula(rng, depth - 1))
        }
        _ => {
            let (a, b) = iv(rng);
            Formula::release(a, b, random_formula(rng, depth - 1), random_formula(rng, depth - 1))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn horizon_rules() {
        let p = Formula::pred(Predicate::above(0, 0.0));
        assert_eq!(p.horizon(), 0);
        assert_eq!(Formula::eventually(0, 3, p.clone()).horizon(), 3);
        let nested = Formula::eventually(0, 3, Formula::always(0, 9, p.clone()));
        assert_eq!(nested.horizon(), 12);
        let u = Formula::until(2, 5, Formula::always(0, 4, p.clone()), p.clone());
        assert_eq!(u.horizon(), 9);
        assert_eq!(Formula::and(vec![p.clone(), u]).horizon(), 9);
    }

    #[test]
    fn trace_validation() {
        assert!(Trace::<f64>::new(vec![]).is_err());
        assert!(Trace::new(vec![vec![1.0, 2.0], vec![1.0]]).is_err());
        let tr = Trace::scalar(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((tr.dim(), tr.horizon()), (1, 2));
    }

    #[test]
    fn dimension_check() {
        let f = Formula::pred(Predicate::affine(vec![(0, 1.0), (3, 2.0)], 0.0, true));
        assert!(f.check_dimension(4).is_ok());
        assert_eq!(f.check_dimension(2), Err(StlError::DimensionMismatch { index: 3, dim: 2 }));
    }

    #[test]
    fn negation_is_an_involution() {
        let f = Formula::until(
            0,
            4,
            Formula::pred(Predicate::above(0, 1.0)),
            Formula::always(1, 2, Formula::pred(Predicate::below(1, 0.5))),
        );
        let reg = PredicateRegistry::new();
        assert_eq!(f.negate(&reg).unwrap().negate(&reg).unwrap(), f);
    }
}
