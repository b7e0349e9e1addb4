//! Synthesis of neural feedback controllers for discrete-time STL
//! specifications, with time-sampled gradients and conformal verification.
//!
//! The crate is organized bottom-up: [`autodiff`] records scalar expressions,
//! [`stl`] and [`smooth`] score trajectories, [`plant`] and [`policy`] produce
//! them, [`sampler`] builds the dropout gradients, [`trainer`] runs the
//! optimization loops and [`verify`] certifies the result.

// NaN-rejecting checks are written as `!(x > 0.0)` on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod exec;
pub mod plant;
pub mod policy;
pub mod sampler;
pub mod scenario;
pub mod scalar;
pub mod smooth;
pub mod stl;
pub mod trainer;
pub mod verify;

use thiserror::Error;

pub use exec::Execution;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error(transparent)]
    Stl(#[from] stl::StlError),
    #[error(transparent)]
    Parse(#[from] stl::ParseError),
    #[error(transparent)]
    Plant(#[from] plant::PlantError),
    #[error(transparent)]
    Policy(#[from] policy::PolicyError),
    #[error(transparent)]
    Tape(#[from] autodiff::TapeError),
    #[error("invalid argument: {0}")]
    Invalid(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
