//! Scalar reverse-mode differentiation.
//!
//! A [`Tape`] is an append-only Wengert list. Every recorded node keeps its
//! primal value together with the local partial derivatives with respect to
//! its (at most two) inputs, so the reverse sweep is a single pass over the
//! node list in decreasing id order.
//!
//! ```
//! use stlnet::autodiff::Tape;
//!
//! let tape = Tape::new();
//! let x = tape.var(2.0);
//! let y = tape.var(3.0);
//! let z = x * y;
//! assert_eq!(z.value(), 6.0);
//! assert_eq!(tape.backward(z, &[x, y]).unwrap(), vec![3.0, 2.0]);
//! ```

use std::cell::{Cell, RefCell};
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

use thiserror::Error;

/// Index of a node on its tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

const NO_INPUT: u32 = u32::MAX;

/// Operation recorded on a tape node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Op {
    /// Differentiable leaf (a seed candidate).
    Input,
    Const,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Tanh,
    Exp,
    Ln,
    Sin,
    Cos,
    PowConst(f64),
    Max2,
    Min2,
}

impl Op {
    pub fn arity(self) -> usize {
        match self {
            Op::Input | Op::Const => 0,
            Op::Neg | Op::Tanh | Op::Exp | Op::Ln | Op::Sin | Op::Cos | Op::PowConst(_) => 1,
            Op::Add | Op::Sub | Op::Mul | Op::Div | Op::Max2 | Op::Min2 => 2,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Const => "const",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::Tanh => "tanh",
            Op::Exp => "exp",
            Op::Ln => "ln",
            Op::Sin => "sin",
            Op::Cos => "cos",
            Op::PowConst(_) => "pow_const",
            Op::Max2 => "max2",
            Op::Min2 => "min2",
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TapeError {
    #[error("domain error at node {node}: {op} of {value}")]
    Domain {
        node: NodeId,
        op: &'static str,
        value: f64,
    },
    #[error("{op} expects {expected} inputs, got {got}")]
    Arity {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("variable belongs to a different tape")]
    ForeignVar,
}

#[derive(Debug, Clone, Copy)]
struct Node {
    op: Op,
    inputs: [u32; 2],
    partials: [f64; 2],
    value: f64,
}

/// Append-only record of scalar operations.
///
/// A tape is single-owner; use one tape per worker when differentiating in
/// parallel.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    fault: Cell<Option<(NodeId, &'static str, f64)>>,
}

/// A differentiable scalar living on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
    value: f64,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var({}, {})", self.id, self.value)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(nodes: usize) -> Self {
        Self {
            nodes: RefCell::new(Vec::with_capacity(nodes)),
            fault: Cell::new(None),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every node; previously issued [`Var`]s must not be used again.
    pub fn clear(&mut self) {
        self.nodes.get_mut().clear();
        self.fault.set(None);
    }

    /// New differentiable leaf.
    pub fn var(&self, value: f64) -> Var<'_> {
        self.push(Op::Input, [NO_INPUT; 2], [0.0; 2], value)
    }

    pub fn vars(&self, values: &[f64]) -> Vec<Var<'_>> {
        values.iter().map(|&v| self.var(v)).collect()
    }

    pub fn constant(&self, value: f64) -> Var<'_> {
        self.push(Op::Const, [NO_INPUT; 2], [0.0; 2], value)
    }

    pub fn constants(&self, values: &[f64]) -> Vec<Var<'_>> {
        values.iter().map(|&v| self.constant(v)).collect()
    }

    /// Records `op` applied to `inputs`, rejecting domain violations.
    pub fn record<'t>(&'t self, op: Op, inputs: &[Var<'t>]) -> Result<Var<'t>, TapeError> {
        if inputs.len() != op.arity() {
            return Err(TapeError::Arity {
                op: op.name(),
                expected: op.arity(),
                got: inputs.len(),
            });
        }
        if inputs.iter().any(|v| !std::ptr::eq(v.tape, self)) {
            return Err(TapeError::ForeignVar);
        }
        let next = NodeId(self.len() as u32);
        if let Some(bad) = domain_violation(op, inputs) {
            return Err(TapeError::Domain {
                node: next,
                op: op.name(),
                value: bad,
            });
        }
        Ok(match op {
            Op::Input => unreachable!("arity 0 handled by var()"),
            Op::Const => unreachable!("arity 0 handled by constant()"),
            _ => self.apply(op, inputs),
        })
    }

    /// Reverse accumulation from `output`; returns d output / d seed for each seed.
    pub fn backward(&self, output: Var<'_>, seeds: &[Var<'_>]) -> Result<Vec<f64>, TapeError> {
        if let Some((node, op, value)) = self.fault.get() {
            return Err(TapeError::Domain { node, op, value });
        }
        if !std::ptr::eq(output.tape, self) || seeds.iter().any(|s| !std::ptr::eq(s.tape, self)) {
            return Err(TapeError::ForeignVar);
        }
        let adjoint = self.adjoints(output);
        Ok(seeds
            .iter()
            .map(|s| adjoint.get(s.id.index()).copied().unwrap_or(0.0))
            .collect())
    }

    /// Fails if any operator-overloaded recording hit a domain violation.
    pub fn check(&self) -> Result<(), TapeError> {
        match self.fault.get() {
            Some((node, op, value)) => Err(TapeError::Domain { node, op, value }),
            None => Ok(()),
        }
    }

    fn adjoints(&self, output: Var<'_>) -> Vec<f64> {
        let nodes = self.nodes.borrow();
        let last = output.id.index();
        let mut adjoint = vec![0.0; last + 1];
        adjoint[last] = 1.0;
        for i in (0..=last).rev() {
            let a = adjoint[i];
            if a == 0.0 {
                continue;
            }
            let node = &nodes[i];
            for slot in 0..2 {
                let input = node.inputs[slot];
                if input != NO_INPUT {
                    adjoint[input as usize] += node.partials[slot] * a;
                }
            }
        }
        adjoint
    }

    fn push(&self, op: Op, inputs: [u32; 2], partials: [f64; 2], value: f64) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = NodeId(nodes.len() as u32);
        nodes.push(Node {
            op,
            inputs,
            partials,
            value,
        });
        Var {
            tape: self,
            id,
            value,
        }
    }

    fn apply<'t>(&'t self, op: Op, inputs: &[Var<'t>]) -> Var<'t> {
        let x = inputs[0].value;
        let y = inputs.get(1).map_or(0.0, |v| v.value);
        let (value, partials) = match op {
            Op::Add => (x + y, [1.0, 1.0]),
            Op::Sub => (x - y, [1.0, -1.0]),
            Op::Mul => (x * y, [y, x]),
            Op::Div => (x / y, [1.0 / y, -x / (y * y)]),
            Op::Neg => (-x, [-1.0, 0.0]),
            Op::Tanh => {
                let t = x.tanh();
                (t, [1.0 - t * t, 0.0])
            }
            Op::Exp => {
                let e = x.exp();
                (e, [e, 0.0])
            }
            Op::Ln => (x.ln(), [1.0 / x, 0.0]),
            Op::Sin => (x.sin(), [x.cos(), 0.0]),
            Op::Cos => (x.cos(), [-x.sin(), 0.0]),
            Op::PowConst(p) => (x.powf(p), [p * x.powf(p - 1.0), 0.0]),
            Op::Max2 => {
                let w = if x > y {
                    [1.0, 0.0]
                } else if x < y {
                    [0.0, 1.0]
                } else {
                    [0.5, 0.5]
                };
                (if x >= y { x } else { y }, w)
            }
            Op::Min2 => {
                let w = if x < y {
                    [1.0, 0.0]
                } else if x > y {
                    [0.0, 1.0]
                } else {
                    [0.5, 0.5]
                };
                (if x <= y { x } else { y }, w)
            }
            Op::Input | Op::Const => unreachable!(),
        };
        let ids = [
            inputs[0].id.0,
            inputs.get(1).map_or(NO_INPUT, |v| v.id.0),
        ];
        self.push(op, ids, partials, value)
    }

    /// Operator-overloading path: records the node and remembers the first
    /// domain violation so that [`Tape::backward`] reports it.
    fn apply_lenient<'t>(&'t self, op: Op, inputs: &[Var<'t>]) -> Var<'t> {
        debug_assert!(inputs.iter().all(|v| std::ptr::eq(v.tape, self)));
        if self.fault.get().is_none() {
            if let Some(bad) = domain_violation(op, inputs) {
                self.fault
                    .set(Some((NodeId(self.len() as u32), op.name(), bad)));
            }
        }
        self.apply(op, inputs)
    }

    /// Operation, input ids and value recorded at `id`.
    pub fn node(&self, id: NodeId) -> (Op, [u32; 2], f64) {
        let n = self.nodes.borrow()[id.index()];
        (n.op, n.inputs, n.value)
    }
}

fn domain_violation(op: Op, inputs: &[Var<'_>]) -> Option<f64> {
    match op {
        Op::Ln if inputs[0].value <= 0.0 => Some(inputs[0].value),
        Op::Div if inputs[1].value == 0.0 => Some(inputs[1].value),
        Op::PowConst(p) if inputs[0].value < 0.0 && p.fract() != 0.0 => Some(inputs[0].value),
        _ => None,
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn unary(self, op: Op) -> Self {
        self.tape.apply_lenient(op, &[self])
    }

    fn binary(self, op: Op, rhs: Self) -> Self {
        self.tape.apply_lenient(op, &[self, rhs])
    }

    pub fn constant(&self, value: f64) -> Self {
        self.tape.constant(value)
    }

    pub fn tanh(self) -> Self {
        self.unary(Op::Tanh)
    }

    pub fn exp(self) -> Self {
        self.unary(Op::Exp)
    }

    pub fn ln(self) -> Self {
        self.unary(Op::Ln)
    }

    pub fn sin(self) -> Self {
        self.unary(Op::Sin)
    }

    pub fn cos(self) -> Self {
        self.unary(Op::Cos)
    }

    pub fn powf(self, p: f64) -> Self {
        self.unary(Op::PowConst(p))
    }

    pub fn max(self, other: Self) -> Self {
        self.binary(Op::Max2, other)
    }

    pub fn min(self, other: Self) -> Self {
        self.binary(Op::Min2, other)
    }
}

macro_rules! var_binop {
    ($trait:ident, $method:ident, $op:expr) => {
        impl<'t> $trait for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                self.binary($op, rhs)
            }
        }

        impl<'t> $trait<f64> for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: f64) -> Var<'t> {
                let c = self.tape.constant(rhs);
                self.binary($op, c)
            }
        }

        impl<'t> $trait<Var<'t>> for f64 {
            type Output = Var<'t>;
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                let c = rhs.tape.constant(self);
                c.binary($op, rhs)
            }
        }
    };
}

var_binop!(Add, add, Op::Add);
var_binop!(Sub, sub, Op::Sub);
var_binop!(Mul, mul, Op::Mul);
var_binop!(Div, div, Op::Div);

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.unary(Op::Neg)
    }
}
