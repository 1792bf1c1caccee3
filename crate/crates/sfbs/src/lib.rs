//! Solvers for monotone inclusions `0 in Ax + Bx` and structured composite
//! minimization, built around the relaxed, perturbed stochastic
//! forward-backward iteration and its primal-dual specialization, with
//! runtime auditors for every convergence hypothesis: admissibility
//! certificates, quasi-Fejér monitors, partial-sum summability reports, and
//! bias/variance decay tracking for growing-batch gradient estimators.
//!
//! The `sfbs` binary drives seeded experiments from TOML configurations; see
//! the repository README for the CLI verbs and the trace formats.

pub mod config;
pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod fb;
pub mod operators;
pub mod primal_dual;
pub mod spaces;
pub mod stochastic;

pub use error::{Error, Result};
