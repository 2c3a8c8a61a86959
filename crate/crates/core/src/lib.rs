//! Solver and simulation toolkit for exit-time control of cooperative-agent
//! jump processes on the probability simplex.
//!
//! `n` agents move on a finite state set under controllable jump rates; the
//! controller pays a per-edge cost `C` for deviating from the nominal rates
//! and collects a reward `R` until the empirical measure first enters a
//! target region `K`. The crate solves the risk-sensitive and risk-neutral
//! Bellman equations on the lattice `P^n(X)` by independent algorithms,
//! verifies their `V = -(1/n) log W` equivalence, simulates the controlled
//! processes, and studies the large-`n` deterministic limit.
//!
//! Modules:
//! - [`cost`]: cost families, Legendre duals, the transformed cost `F`,
//!   the closed-form Hamiltonian, admissibility and minimax checks.
//! - [`lattice`]: enumeration and transition structure of `P^n(X)`,
//!   target sets and their fattenings, empirical projections.
//! - [`solver`]: value iteration for the risk-neutral equation, per-state
//!   root finding for the risk-sensitive one, the product-space solver,
//!   and policy extraction.
//! - [`sim`]: Gillespie simulation of the controlled empirical-measure and
//!   n-agent processes, Monte Carlo cost estimators, the law-of-large-
//!   numbers experiment.
//! - [`limit`]: the deterministic control problem, straight-line and
//!   tracking controls, trajectory optimization, and the lattice-to-limit
//!   convergence study.
//! - [`config`]: experiment configuration loading and validation.
//! - [`report`]: deterministic CSV/JSON exports with embedded config and
//!   content hashes.

pub mod config;
pub mod cost;
pub mod error;
pub mod lattice;
pub mod limit;
pub mod report;
pub mod scalar;
pub mod sim;
pub mod solver;

pub use cost::{CostFamily, CostModel, EdgeSet, RewardSpec};
pub use error::{Error, Result};
pub use lattice::{SimplexGrid, TargetSet, TargetSpec};
