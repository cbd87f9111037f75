//! Mean field games on directed graphs.
//!
//! * [`mfg`] solves the coupled backward value / forward population system
//!   by damped fixed-point iteration.
//! * [`verification`] certifies a solution: payoffs of arbitrary controls,
//!   Nash gaps over deviation families, and the monotonicity criterion for
//!   uniqueness.
//! * [`planning`] solves the planner's single Hamilton-Jacobi equation on
//!   the simplex for potential games and recovers the equilibrium from its
//!   gradient.
//! * [`config`] and [`run`] drive everything from a JSON file.
//!
//! Nodes are 0-based in the API and 1-based in files and messages.

#![allow(clippy::needless_range_loop)]

pub mod config;
pub mod coupling;
pub mod error;
pub mod graph;
pub mod hamiltonian;
pub mod mfg;
mod ode;
pub mod planning;
pub mod run;
pub mod simplex;
pub mod time_grid;
pub mod verification;

pub use error::{Error, Result};
