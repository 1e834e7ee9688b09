//! Non-cooperative power-allocation ("water-filling") games on
//! frequency-selective Gaussian interference channels.
//!
//! `K` transmitter/receiver pairs share `N` frequency bins. Each user k picks
//! a per-bin transmit PSD `P_k^n` under a total-power budget and achieves
//!
//! ```text
//! R_k = sum_n log2(1 + P_k^n / (sigma_k^n + sum_{i != k} alpha_ik^n P_i^n))
//! ```
//!
//! where `sigma_k^n` is normalized noise and `alpha_ik^n` normalized cross
//! gains. Myopic users repeatedly water-fill against measured interference
//! (iterative water-filling, converging to a Nash equilibrium). A single
//! foresighted user can do better: it models the *stationary* interference it
//! will face after its rivals re-equilibrate as a per-bin linear function of
//! its own power, and optimizes its rate under that conjecture.
//!
//! The crate provides:
//!
//! - [`instance`]: the game data model and a seeded Rayleigh multipath
//!   instance generator.
//! - [`waterfill`]: rate evaluation and the closed-form single-user
//!   water-filling best response.
//! - [`equilibrium`]: iterative water-filling to a Nash equilibrium, for either
//!   the full game or the follower subgame with one user held fixed, plus the
//!   `||G||_inf < 1` uniqueness screen.
//! - [`conjecture`]: linear interference beliefs — closed-form and
//!   finite-difference derivatives of stationary interference, tangent belief
//!   construction, the concavity screen, and the consistency residual.
//! - [`mod@crm`]: conjecture-based rate maximization — the dual bisection solver
//!   for the conjectured-rate problem, the true-rate line search, the outer
//!   learning loop, and a desk-scale Stackelberg grid oracle.
//! - [`harness`]: seeded Monte Carlo trials, ensemble statistics, and CSV
//!   output.
//!
//! The `wfg` binary exposes `gen`, `solve-ne`, `crm`, `se-grid`, and
//! `ensemble` subcommands over the same API. A narrative guide with runnable
//! examples lives in `book/` at the workspace root; its code snippets
//! compile as doctests of this crate (the `book` module, present only under
//! `cfg(doctest)`).

pub mod conjecture;
pub mod crm;
pub mod equilibrium;
mod error;
pub mod harness;
pub mod instance;
pub mod waterfill;

#[cfg(doctest)]
pub mod book;

pub use error::{Error, Result};
pub use instance::{
    generate_instance, read_instance, validate_instance, write_instance, ChannelModelParams,
    GameInstance,
};
pub use waterfill::{achievable_rate, stationary_interference, waterfill_best_response, PowerAllocation, WaterfillResult};
pub use equilibrium::{
    check_uniqueness_condition, iterate_waterfilling, solve_followers, IwOptions, NashOutcome,
};
pub use conjecture::{
    ce_residual, check_sc1, closed_form_derivative, estimate_derivative_fd,
    estimate_derivatives_batch, estimate_derivatives_exact, update_belief, Belief, BeliefUpdate,
    DerivativeEstimate,
};
pub use crm::{
    conjectured_rate, crm, dual_bisection, grid_search_se, inner_max_per_bin, line_search,
    CrmIteration, CrmOptions, CrmTrace, DualSolve, FdMode, LineSearchResult, SeOutcome, StopReason,
};
pub use harness::{run_ensemble, run_trial, EnsembleStats, RunConfig, TrialReport};
