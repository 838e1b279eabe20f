//! Value functions of stochastic control problems driven by fully coupled
//! forward-backward SDEs.
//!
//! Two independent pipelines compute the value function `W(t, x)`:
//!
//! * [`control::value_function_dpp`] runs backward dynamic programming, where each
//!   step is a short-interval FBSDE solve ([`fbsde::one_step_solve`]) on a
//!   moment-matched noise lattice;
//! * [`hjb::solve_case1`] and [`hjb::solve_case2`] integrate the HJB equation by
//!   explicit finite differences, the latter coupled nodewise to the algebraic
//!   equation `V = DW sigma(t, x, W, V)` solved in [`algebraic`].
//!
//! [`verify`] turns structural properties of `W` (comparison, monotonicity,
//! Lipschitz and time regularity, flow consistency) into pass/fail checks.

pub mod algebraic;
pub mod control;
pub mod error;
pub mod expr;
pub mod fbsde;
pub mod field;
pub mod grid;
pub mod hjb;
pub mod model;
pub mod report;
pub mod verify;

pub use error::{Error, Result};
pub use fbsde::{NoiseLattice, OneStepOptions, OneStepSolution};
pub use field::{FieldSequence, ValueField};
pub use grid::{GridPair, Interpolant, SpaceLattice, TimeGrid};
pub use model::{ControlProblem, Lambda, SamplerConfig, ValidationReport};
pub use report::SolveReport;
