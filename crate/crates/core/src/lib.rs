//! Finite-difference solver for a three-state climate-economy
//! Hamilton-Jacobi-Bellman problem.
//!
//! The crate is `no_std` (with `alloc`). It contains the model equations,
//! grid stencils, the policy-iteration loop with its implicit linear step,
//! the error metrics used to score candidate solutions, and a Monte-Carlo
//! emulator that runs a solved policy forward in time. File formats, the
//! command line and parallel execution live in the `hjb` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod emulator;
pub mod error;
pub mod evaluator;
pub mod grid;
pub mod linear_solver;
pub mod model;
pub mod policy;
pub mod solver;

pub use error::{Error, Result};
pub use grid::{Axis, AxisSpec, BoundaryStencil, Grid3, ScalarField, ValueGradients};
pub use model::{ControlVector, DriftVector, ModelParams, StateVector};
pub use solver::{solve, solve_with, SolutionGrid, SolutionMeta, SolverConfig, Start};
