//! Simulation and reinforcement-learning control of the one-dimensional
//! tilted Fermi-Hubbard ring.

// Negated comparisons are used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod env;
pub mod error;
pub mod fock;
pub mod hamiltonian;
pub mod nn;
pub mod observables;
pub mod ppo;
pub mod propagator;
pub mod protocols;

pub use error::{Error, Result};
