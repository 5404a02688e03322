//! Biased contribution index (BCI) for peer-to-peer networks.
//!
//! A peer's BCI rises when it uploads, especially to well-ranked peers, and
//! falls when it downloads, especially from poorly-ranked ones. Scores live in
//! `[1 − α, 1]`; free riders sit at the floor `1 − α` and a network where every
//! peer uploads as much as it downloads settles at the neutral value `1 − α/2`.
//!
//! - [`ledger`] stores the share matrix and answers structural questions.
//! - [`solver`] computes the index by fixed-point iteration.
//! - [`distributed`] replays the computation across index managers that
//!   exchange messages on a virtual clock and settle disputes by vote.
//! - [`sim`] runs admission-control scenarios with free riders.

pub mod distributed;
pub mod ledger;
pub mod numfmt;
pub mod sim;
pub mod solver;

pub use ledger::{LedgerError, LedgerFormat, LedgerSummary, PeerId, ShareMatrix};
pub use solver::{
    fixed_point_residual, initial_vector, max_bci, min_bci, neutral_bci, phi_step, solve, sweep_alpha,
    verify_uniform_solution, BciParams, BciVector, SolveResult, SolveWarning, SolverError, Stopping,
    SweepPoint, UniformCheck,
};
