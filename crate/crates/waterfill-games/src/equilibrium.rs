//! Nash equilibrium of myopic users by iterative water-filling (IW).
//!
//! Each non-fixed user in turn replaces its allocation with the water-filling
//! best response to the interference the current allocations cause it
//! (Gauss-Seidel sweeps). Under the `||G||_inf < 1` screen of
//! [`check_uniqueness_condition`] the map is a contraction and the sweep
//! order does not matter.
//!
//! Holding one user fixed solves the *follower subgame*: the equilibrium the
//! remaining users settle into given that user's committed allocation. That
//! subgame is the inner problem of every foresighted-user computation in
//! [`crate::conjecture`] and [`mod@crate::crm`].

use crate::error::{Error, Result};
use crate::instance::GameInstance;
use crate::waterfill::{waterfill_best_response, PowerAllocation};

/// Iterative water-filling controls.
#[derive(Debug, Clone)]
pub struct IwOptions {
    /// Sweep-to-sweep max-norm change below which IW stops.
    pub tol: f64,
    /// Maximum number of full sweeps.
    pub max_iter: usize,
    /// Sweep users in reverse index order (used to probe order robustness).
    pub reverse_order: bool,
}

impl Default for IwOptions {
    fn default() -> Self {
        IwOptions {
            tol: 1e-8,
            max_iter: 10_000,
            reverse_order: false,
        }
    }
}

/// Converged (or not) outcome of iterative water-filling.
#[derive(Debug, Clone)]
pub struct NashOutcome {
    /// Allocations of all `K` users, including the fixed one when present.
    pub allocations: Vec<PowerAllocation>,
    /// Per-user water levels from each user's last best response; `None` for
    /// a fixed user.
    pub water_levels: Vec<Option<f64>>,
    pub converged: bool,
    /// Full sweeps performed.
    pub iterations: usize,
    /// Max-norm change over the final sweep.
    pub residual: f64,
    /// User whose allocation was held fixed, if any.
    pub fixed_user: Option<usize>,
}

impl NashOutcome {
    /// The allocation of user `k`.
    pub fn allocation(&self, k: usize) -> &PowerAllocation {
        &self.allocations[k]
    }
}

/// Runs Gauss-Seidel iterative water-filling.
///
/// `fixed` pins one user to a given allocation (the follower-subgame form);
/// `init` seeds all `K` allocations (fixed user's entry ignored), defaulting
/// to all-zero. Stops when the max-norm change over a full sweep is at most
/// `opts.tol` (`converged = true`) or after `opts.max_iter` sweeps
/// (`converged = false`; not an error).
///
/// With exactly one non-fixed user there are no opponent dynamics: its single
/// best response is the equilibrium, so the solve finishes in one sweep with
/// zero residual.
pub fn iterate_waterfilling(
    inst: &GameInstance,
    fixed: Option<(usize, &PowerAllocation)>,
    init: Option<&[PowerAllocation]>,
    opts: &IwOptions,
) -> Result<NashOutcome> {
    if let Some((user, alloc)) = fixed {
        let mut tagged = alloc.clone();
        tagged.owner = user;
        tagged.validate(inst)?;
    }
    iw_run(inst, fixed, init, opts)
}

fn iw_run(
    inst: &GameInstance,
    fixed: Option<(usize, &PowerAllocation)>,
    init: Option<&[PowerAllocation]>,
    opts: &IwOptions,
) -> Result<NashOutcome> {
    let k_users = inst.num_users;
    let n_bins = inst.num_bins;

    let mut allocations: Vec<PowerAllocation> = match init {
        Some(given) => {
            if given.len() != k_users {
                return Err(Error::InvalidInstance(format!(
                    "init has {} allocations, expected {k_users}",
                    given.len()
                )));
            }
            given
                .iter()
                .enumerate()
                .map(|(k, a)| {
                    let mut a = a.clone();
                    a.owner = k;
                    a.validate(inst).map(|_| a)
                })
                .collect::<Result<_>>()?
        }
        None => (0..k_users)
            .map(|k| PowerAllocation::zeros(n_bins, k))
            .collect(),
    };
    if let Some((user, alloc)) = fixed {
        allocations[user] = PowerAllocation::new(alloc.power.clone(), user);
    }

    let fixed_user = fixed.map(|(u, _)| u);
    let mut order: Vec<usize> = (0..k_users).filter(|k| Some(*k) != fixed_user).collect();
    if opts.reverse_order {
        order.reverse();
    }
    let mut water_levels: Vec<Option<f64>> = vec![None; k_users];

    let mut sigma_eff = vec![0.0; n_bins];
    let single_free_user = order.len() == 1;
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;

    for sweep in 1..=opts.max_iter {
        let mut max_change: f64 = 0.0;
        for &k in &order {
            for (n, eff) in sigma_eff.iter_mut().enumerate() {
                let mut acc = inst.noise[[k, n]];
                for alloc in &allocations {
                    if alloc.owner != k {
                        acc += inst.gain(alloc.owner, k, n) * alloc.power[n];
                    }
                }
                *eff = acc;
            }
            let wf = waterfill_best_response(&sigma_eff, inst.budget(k))?;
            let mut new_alloc = wf.allocation;
            new_alloc.owner = k;
            max_change = max_change.max(allocations[k].max_norm_distance(&new_alloc));
            allocations[k] = new_alloc;
            water_levels[k] = Some(wf.water_level);
        }
        iterations = sweep;
        if single_free_user {
            // One best response is the subgame equilibrium by definition.
            residual = 0.0;
            converged = true;
            break;
        }
        residual = max_change;
        if max_change <= opts.tol {
            converged = true;
            break;
        }
    }

    Ok(NashOutcome {
        allocations,
        water_levels,
        converged,
        iterations,
        residual,
        fixed_user,
    })
}

/// Solves the follower subgame (all users except `leader` re-equilibrate to
/// the leader's committed allocation) and *requires* convergence.
pub fn solve_followers(
    inst: &GameInstance,
    leader: usize,
    leader_alloc: &PowerAllocation,
    opts: &IwOptions,
) -> Result<NashOutcome> {
    let out = iterate_waterfilling(inst, Some((leader, leader_alloc)), None, opts)?;
    if !out.converged {
        return Err(Error::LowerLevelDiverged {
            iterations: out.iterations,
            residual: out.residual,
        });
    }
    Ok(out)
}

/// Follower subgame without the leader budget check: finite-difference
/// probes intentionally overshoot the budget by epsilon to measure the
/// response map. Powers must still be non-negative.
pub(crate) fn solve_followers_relaxed(
    inst: &GameInstance,
    leader: usize,
    leader_alloc: &PowerAllocation,
    opts: &IwOptions,
) -> Result<NashOutcome> {
    if let Some((n, &p)) = leader_alloc
        .power
        .iter()
        .enumerate()
        .find(|(_, p)| **p < 0.0 || !p.is_finite())
    {
        return Err(Error::InfeasibleAllocation {
            user: leader,
            reason: format!("negative or non-finite power {p} in bin {n}"),
        });
    }
    let out = iw_run(inst, Some((leader, leader_alloc)), None, opts)?;
    if !out.converged {
        return Err(Error::LowerLevelDiverged {
            iterations: out.iterations,
            residual: out.residual,
        });
    }
    Ok(out)
}

/// Sufficient-condition screen for NE existence/uniqueness: builds, per bin,
/// the interference-coupling matrix with rows indexed by receivers (row `k`
/// holds `alpha_jk` for `j != k`, the layout of the follower response system)
/// and returns `(worst < 1, worst)` where `worst` is the largest row sum over
/// all bins.
pub fn check_uniqueness_condition(inst: &GameInstance) -> (bool, f64) {
    let mut worst: f64 = 0.0;
    for n in 0..inst.num_bins {
        for k in 0..inst.num_users {
            let row_sum: f64 = (0..inst.num_users)
                .filter(|&j| j != k)
                .map(|j| inst.gain(j, k, n))
                .sum();
            worst = worst.max(row_sum);
        }
    }
    (worst < 1.0, worst)
}
