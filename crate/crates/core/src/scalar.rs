//! Numeric abstraction shared by plain (`f64`) and taped ([`Var`]) evaluation.
//!
//! Plant dynamics, the policy network and the smooth robustness are written
//! once against [`Scalar`]. Both implementations perform the same floating
//! point operations in the same order, so a taped evaluation reproduces the
//! plain one bit for bit.

use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::autodiff::Var;

pub trait Scalar:
    Copy
    + std::fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    fn value(&self) -> f64;
    /// A constant in the same evaluation context as `self`.
    fn lift(&self, c: f64) -> Self;
    fn tanh(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn powf(self, p: f64) -> Self;
    fn max2(self, other: Self) -> Self;
    fn min2(self, other: Self) -> Self;

    fn tan(self) -> Self {
        self.sin() / self.cos()
    }
}

impl Scalar for f64 {
    fn value(&self) -> f64 {
        *self
    }
    fn lift(&self, c: f64) -> Self {
        c
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn cos(self) -> Self {
        f64::cos(self)
    }
    fn powf(self, p: f64) -> Self {
        f64::powf(self, p)
    }
    fn max2(self, other: Self) -> Self {
        if self >= other {
            self
        } else {
            other
        }
    }
    fn min2(self, other: Self) -> Self {
        if self <= other {
            self
        } else {
            other
        }
    }
}

impl<'t> Scalar for Var<'t> {
    fn value(&self) -> f64 {
        Var::value(self)
    }
    fn lift(&self, c: f64) -> Self {
        self.constant(c)
    }
    fn tanh(self) -> Self {
        Var::tanh(self)
    }
    fn exp(self) -> Self {
        Var::exp(self)
    }
    fn ln(self) -> Self {
        Var::ln(self)
    }
    fn sin(self) -> Self {
        Var::sin(self)
    }
    fn cos(self) -> Self {
        Var::cos(self)
    }
    fn powf(self, p: f64) -> Self {
        Var::powf(self, p)
    }
    fn max2(self, other: Self) -> Self {
        Var::max(self, other)
    }
    fn min2(self, other: Self) -> Self {
        Var::min(self, other)
    }
}

pub fn values<S: Scalar>(xs: &[S]) -> Vec<f64> {
    xs.iter().map(Scalar::value).collect()
}
