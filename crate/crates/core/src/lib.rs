//! Numerical verification toolkit for first- and second-order pointwise
//! necessary conditions in stochastic optimal control.
//!
//! Given a polynomial control problem and a candidate control, the crate
//! simulates the forward, variational and adjoint systems on one shared
//! seeded grid and evaluates the necessary-condition functionals with
//! Monte Carlo error bars, rendering quantified HOLDS / VIOLATED /
//! INCONCLUSIVE verdicts.
//!
//! Module map:
//! - [`problem`]: problem data, candidate controls, exact coefficient calculus
//! - [`sim`]: seeded Euler-Maruyama engine for state, transition and
//!   variational equations
//! - [`adjoint`]: backward adjoint solvers (analytic and regression) and
//!   duality diagnostics
//! - [`malliavin`]: tangent-process noise derivatives and reconstruction checks
//! - [`conditions`]: the necessary-condition functionals and their verdicts
//! - [`scenarios`]: built-in problems with closed-form ground truth
//! - [`report`]: JSON report schema and merging

pub mod adjoint;
pub mod conditions;
pub mod error;
pub mod linalg;
pub mod malliavin;
pub mod poly;
pub mod problem;
pub mod regression;
pub mod report;
pub mod rng;
pub mod scenarios;
pub mod schema;
pub mod sim;
pub mod stats;

pub use error::{Error, Result};

/// Tool version stamped into reports.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
