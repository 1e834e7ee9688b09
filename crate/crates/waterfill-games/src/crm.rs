//! Conjecture-based rate maximization (CRM) and a desk-scale Stackelberg
//! oracle.
//!
//! Under a linear belief the foresighted user's problem is
//!
//! ```text
//! max  sum_n ln(1 + P^n / (sigma^n + beta^n - gamma^n P^n))
//! s.t. P^n >= 0,  beta^n - gamma^n P^n >= 0,  sum_n P^n <= budget
//! ```
//!
//! The per-bin objective is separable, so the problem is solved in the dual:
//! bisect on the price `eta`, maximizing `f_n(P) - eta P` per bin in closed
//! form (the stationary points solve a quadratic; see [`inner_max_per_bin`]).
//! For large `N` the duality gap of this separable program vanishes, which is
//! what licenses the dual route even when a bin's objective is not concave;
//! each solve reports its realized primal-dual gap as a diagnostic.
//!
//! The CRM loop alternates a tangent belief update at the current operating
//! point with a dual solve under that belief, then line-searches the *true*
//! rate (followers re-equilibrated at every probe) between the current point
//! and the candidate, so the achieved rate never decreases. An optional
//! per-bin trust radius restricts the candidate to a box around the current
//! point, trading extra iterations for better final rates.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conjecture::{
    ce_residual, check_sc1, estimate_derivatives_batch, estimate_derivatives_exact, update_belief,
    Belief,
};
use crate::equilibrium::{
    check_uniqueness_condition, iterate_waterfilling, solve_followers, IwOptions, NashOutcome,
};
use crate::error::{Error, Result};
use crate::instance::GameInstance;
use crate::waterfill::{achievable_rate, stationary_interference, PowerAllocation};

/// Finite-difference scheduling for the belief update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FdMode {
    /// Balanced-dither probe of all bins at once (two extra follower solves),
    /// falling back to per-bin probes where a kink is detected. Cheap, and
    /// accurate in the small-eps regime.
    Batch,
    /// Probe every bin individually (2N extra follower solves). The default:
    /// with the macroscopic default probe size, isolated probes track the
    /// follower response far better than the dither.
    PerBin,
}

/// Knobs of the CRM loop and its dual solver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrmOptions {
    /// Per-bin cap on `|candidate - current|`; `None` disables the trust
    /// region (plain CRM), `Some(1.0)` is the modified CRM of the two-user
    /// and three-user experiments.
    pub trust_radius: Option<f64>,
    /// Evenly spaced points of the true-rate line search (includes both ends).
    pub line_search_points: usize,
    /// An outer iteration must improve the true rate by at least this many
    /// bits to be adopted; a below-tolerance step is discarded and the run
    /// stops where it stands.
    pub improvement_tol: f64,
    pub max_outer_iter: usize,
    /// Relative tolerance of the dual bisection on `eta`.
    pub eta_bisect_tol: f64,
    pub fd_mode: FdMode,
    /// Probe size for the belief's finite differences; `None` uses
    /// `0.85 * budget / N`, most of the per-bin power of a uniform spread.
    /// A probe of that size measures the follower response as a secant
    /// across the power range the dual candidate actually explores, which
    /// makes the resulting belief far more useful to the optimizer than an
    /// infinitesimal tangent; the 0.85 factor is calibrated on the two-user
    /// ensemble.
    pub fd_eps: Option<f64>,
}

impl Default for CrmOptions {
    fn default() -> Self {
        CrmOptions {
            trust_radius: None,
            line_search_points: 101,
            improvement_tol: 0.5,
            max_outer_iter: 50,
            eta_bisect_tol: 1e-10,
            fd_mode: FdMode::PerBin,
            fd_eps: None,
        }
    }
}

impl CrmOptions {
    /// The modified CRM variant: per-bin step capped at 1.
    pub fn modified() -> Self {
        CrmOptions {
            trust_radius: Some(1.0),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.line_search_points == 0 {
            bad.push("line_search_points must be positive".to_string());
        }
        if self.max_outer_iter == 0 {
            bad.push("max_outer_iter must be positive".to_string());
        }
        if self.improvement_tol <= 0.0 || self.improvement_tol.is_nan() {
            bad.push("improvement_tol must be positive".to_string());
        }
        if self.eta_bisect_tol <= 0.0 || self.eta_bisect_tol.is_nan() {
            bad.push("eta_bisect_tol must be positive".to_string());
        }
        if let Some(r) = self.trust_radius {
            if r <= 0.0 || r.is_nan() {
                bad.push("trust_radius must be positive".to_string());
            }
        }
        if let Some(e) = self.fd_eps {
            if e <= 0.0 || e.is_nan() {
                bad.push("fd_eps must be positive".to_string());
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidOptions(bad.join("; ")))
        }
    }
}

/// Conjectured rate in nats: `sum_n ln(1 + P^n/(sigma^n + beta^n - gamma^n P^n))`.
///
/// Errors (naming the bin) if any power leaves the belief domain.
pub fn conjectured_rate(sigma1: &[f64], belief: &Belief, p1: &PowerAllocation) -> Result<f64> {
    let mut rate = 0.0;
    for (n, (&p, &s)) in p1.power.iter().zip(sigma1).enumerate() {
        let conj = belief.conjectured(n, p);
        let slack = 1e-9 * (s + belief.beta[n].abs() + belief.gamma[n].abs() * p.abs() + 1.0);
        if p < 0.0 || conj < -slack {
            return Err(Error::BeliefDomain {
                bin: n,
                power: p,
                beta: belief.beta[n],
                gamma: belief.gamma[n],
            });
        }
        rate += (1.0 + p / (s + conj.max(0.0))).ln();
    }
    Ok(rate)
}

/// Per-bin Lagrangian term `f(P) - eta P` with
/// `f(P) = ln(sigma + beta + (1-gamma) P) - ln(sigma + beta - gamma P)`.
fn bin_objective(sigma: f64, beta: f64, gamma: f64, eta: f64, p: f64) -> f64 {
    let s = sigma + beta;
    (s + (1.0 - gamma) * p).ln() - (s - gamma * p).ln() - eta * p
}

fn golden_section_max(
    f: &dyn Fn(f64) -> f64,
    mut lo: f64,
    mut hi: f64,
) -> f64 {
    const INV_PHI: f64 = 0.618_033_988_749_895;
    let mut c = hi - INV_PHI * (hi - lo);
    let mut d = lo + INV_PHI * (hi - lo);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..120 {
        if hi - lo <= 1e-13 * (1.0 + hi.abs()) {
            break;
        }
        if fc > fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - INV_PHI * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + INV_PHI * (hi - lo);
            fd = f(d);
        }
    }
    0.5 * (lo + hi)
}

/// Maximizes `f(P) - eta P` over `[lo, hi]` intersected with the belief
/// domain of one bin.
fn inner_max_on_box(sigma: f64, beta: f64, gamma: f64, eta: f64, lo: f64, hi: f64) -> f64 {
    debug_assert!(eta > 0.0 && beta >= 0.0);
    let domain_cap = if gamma > 0.0 {
        beta / gamma
    } else {
        f64::INFINITY
    };
    let hi = hi.min(domain_cap);
    // A trust box can sit above a freshly shrunk domain; fall back to the
    // domain's edge rather than returning an infeasible point.
    let lo = lo.min(hi).max(0.0);
    if hi <= lo {
        return lo;
    }

    let s = sigma + beta;
    let mut candidates: Vec<f64> = vec![lo];
    if hi.is_finite() {
        candidates.push(hi);
    }

    if gamma.abs() <= 1e-9 {
        // Water-filling limit of the stationary condition.
        candidates.push((1.0 / eta - s).clamp(lo, hi.min(f64::MAX)));
    } else if (gamma * (gamma - 1.0)).abs() <= 1e-12 {
        // Degenerate quadratic (gamma ~ 1): guarded 1-D search. The domain
        // cap beta/gamma is finite here, so the bracket is bounded.
        let f = |p: f64| bin_objective(sigma, beta, gamma, eta, p);
        candidates.push(golden_section_max(&f, lo, hi));
    } else {
        // Stationary points: gamma(gamma-1) P^2 - s(2 gamma - 1) P
        //                    + s^2 - s/eta = 0.
        let a = gamma * (gamma - 1.0);
        let b = s * (1.0 - 2.0 * gamma);
        let c = s * s - s / eta;
        let disc = b * b - 4.0 * a * c;
        if disc >= 0.0 {
            let sq = disc.sqrt();
            // Numerically stable pair of roots.
            let q = -0.5 * (b + b.signum() * sq);
            for root in [q / a, if q != 0.0 { c / q } else { f64::NAN }] {
                if root.is_finite() && root > lo && root < hi {
                    candidates.push(root);
                }
            }
        }
    }

    let mut best = lo;
    let mut best_val = f64::NEG_INFINITY;
    for &p in &candidates {
        if !p.is_finite() {
            continue;
        }
        let v = bin_objective(sigma, beta, gamma, eta, p);
        if v > best_val {
            best_val = v;
            best = p;
        }
    }
    best
}

/// Maximizes `ln(1 + P/(sigma + beta - gamma P)) - eta P` over the belief
/// domain of one bin, optionally capped at `cap`. Always returns a feasible
/// point (possibly 0).
pub fn inner_max_per_bin(sigma: f64, beta: f64, gamma: f64, eta: f64, cap: Option<f64>) -> f64 {
    inner_max_on_box(sigma, beta, gamma, eta, 0.0, cap.unwrap_or(f64::INFINITY))
}

/// A dual solve of the conjectured-rate problem.
#[derive(Debug, Clone)]
pub struct DualSolve {
    /// The candidate allocation (owner 0).
    pub allocation: PowerAllocation,
    /// Final dual price; 0 when the box-constrained solution fits the budget.
    pub eta: f64,
    pub bisection_iterations: usize,
    /// Conjectured rate at the returned allocation, in nats.
    pub primal_nats: f64,
    /// Dual objective at `eta`, in nats.
    pub dual_nats: f64,
    /// `dual - primal` diagnostic; ~0 certifies the dual route.
    pub duality_gap_nats: f64,
}

/// Solves the conjectured-rate problem by bisection on the dual price.
///
/// `trust_center` (with `opts.trust_radius`) restricts each bin to the box
/// `[max(0, c - r), c + r]` intersected with the belief domain. The initial
/// price bracket is `[0, 2 max_n 1/(sigma^n + beta^n)]` — twice the largest
/// marginal value at zero power — and is doubled until the high end
/// under-spends the budget, which the initial bound already guarantees when
/// every bin objective is concave. If the box-capped solution at `eta -> 0`
/// already fits the budget it is returned with `eta = 0`.
pub fn dual_bisection(
    sigma1: &[f64],
    belief: &Belief,
    budget: f64,
    opts: &CrmOptions,
    trust_center: Option<&PowerAllocation>,
) -> Result<DualSolve> {
    if budget <= 0.0 || budget.is_nan() {
        return Err(Error::NonPositiveBudget(budget));
    }
    let n_bins = sigma1.len();
    let radius = opts.trust_radius;
    let boxes: Vec<(f64, f64)> = (0..n_bins)
        .map(|n| match (radius, trust_center) {
            (Some(r), Some(center)) => {
                let c = center.power[n];
                ((c - r).max(0.0), c + r)
            }
            _ => (0.0, f64::INFINITY),
        })
        .collect();

    let solve_at = |eta: f64| -> Vec<f64> {
        (0..n_bins)
            .map(|n| {
                inner_max_on_box(
                    sigma1[n],
                    belief.beta[n],
                    belief.gamma[n],
                    eta,
                    boxes[n].0,
                    boxes[n].1,
                )
            })
            .collect()
    };

    let finish = |power: Vec<f64>, eta: f64, iterations: usize| -> Result<DualSolve> {
        let mut power = power;
        let total: f64 = power.iter().sum();
        if total > budget * (1.0 + 1e-9) {
            // Never scale up; shave the overshoot proportionally.
            let shrink = budget / total;
            for p in &mut power {
                *p *= shrink;
            }
        }
        let allocation = PowerAllocation::new(power, 0);
        let primal = conjectured_rate(sigma1, belief, &allocation)?;
        let dual = if eta > 0.0 {
            allocation
                .power
                .iter()
                .enumerate()
                .map(|(n, &p)| bin_objective(sigma1[n], belief.beta[n], belief.gamma[n], eta, p))
                .sum::<f64>()
                + eta * budget
        } else {
            primal
        };
        Ok(DualSolve {
            allocation,
            eta,
            bisection_iterations: iterations,
            primal_nats: primal,
            dual_nats: dual,
            duality_gap_nats: dual - primal,
        })
    };

    // Box-capped upper ends: if they fit the budget the price is zero (the
    // rate term is strictly increasing in every bin).
    let capped: Vec<f64> = (0..n_bins)
        .map(|n| {
            let dom = belief.domain_cap(n);
            boxes[n].1.min(dom).max(boxes[n].0.min(dom))
        })
        .collect();
    if capped.iter().all(|c| c.is_finite()) && capped.iter().sum::<f64>() <= budget {
        return finish(capped, 0.0, 0);
    }

    let mut eta_hi = 2.0
        * sigma1
            .iter()
            .zip(&belief.beta)
            .map(|(&s, &b)| 1.0 / (s + b))
            .fold(0.0f64, f64::max);
    let mut power_hi = solve_at(eta_hi);
    let mut expansions = 0;
    while power_hi.iter().sum::<f64>() >= budget {
        eta_hi *= 2.0;
        power_hi = solve_at(eta_hi);
        expansions += 1;
        if expansions > 60 {
            break;
        }
    }

    let mut eta_lo = 0.0;
    let mut iterations = expansions;
    while eta_hi - eta_lo > opts.eta_bisect_tol * (1.0 + eta_hi) && iterations < 300 {
        let mid = 0.5 * (eta_lo + eta_hi);
        let power = solve_at(mid);
        if power.iter().sum::<f64>() < budget {
            eta_hi = mid;
            power_hi = power;
        } else {
            eta_lo = mid;
        }
        iterations += 1;
    }

    finish(power_hi, eta_hi, iterations)
}

/// Result of the true-rate line search between the current point and a
/// candidate.
#[derive(Debug, Clone)]
pub struct LineSearchResult {
    pub chosen: PowerAllocation,
    /// Mixing weight of the current point: `P(v) = v P_t + (1 - v) P_c`.
    pub v_star: f64,
    /// Leader's true rate at `chosen`, in bits.
    pub rate_bits: f64,
    /// Follower equilibrium at `chosen`.
    pub followers: NashOutcome,
    /// Grid points skipped because the follower subgame failed to converge.
    pub skipped: u32,
}

/// Evaluates the leader's *true* rate (followers re-equilibrated per probe)
/// on `line_search_points` evenly spaced mixtures `v P_t + (1-v) P_c`,
/// `v in [0, 1]`, and returns the maximizer. Ties break toward larger `v`
/// (the smaller step); `v = 1` is always a candidate, so the result never
/// rates below the current point.
pub fn line_search(
    inst: &GameInstance,
    p_t: &PowerAllocation,
    p_c: &PowerAllocation,
    opts: &CrmOptions,
    iw: &IwOptions,
) -> Result<LineSearchResult> {
    let leader = p_t.owner;
    let points = opts.line_search_points.max(2);
    let grid: Vec<f64> = (0..points)
        .map(|i| i as f64 / (points - 1) as f64)
        .collect();

    let evals: Vec<Option<(f64, NashOutcome)>> = grid
        .par_iter()
        .map(|&v| {
            let power: Vec<f64> = p_t
                .power
                .iter()
                .zip(&p_c.power)
                .map(|(&a, &b)| v * a + (1.0 - v) * b)
                .collect();
            let alloc = PowerAllocation::new(power, leader);
            match solve_followers(inst, leader, &alloc, iw) {
                Ok(outcome) => {
                    let rate = achievable_rate(inst, &outcome.allocations, leader);
                    Some((rate, outcome))
                }
                Err(_) => None,
            }
        })
        .collect();

    let mut skipped = 0u32;
    let mut best: Option<(usize, f64)> = None;
    for (i, eval) in evals.iter().enumerate() {
        match eval {
            Some((rate, _)) => {
                // `>=` so later (larger v) grid points win ties.
                if best.is_none_or(|(_, r)| *rate >= r) {
                    best = Some((i, *rate));
                }
            }
            None => skipped += 1,
        }
    }

    let (idx, rate) = best.ok_or(Error::LowerLevelDiverged {
        iterations: iw.max_iter,
        residual: f64::NAN,
    })?;
    let v = grid[idx];
    let (_, followers) = evals.into_iter().nth(idx).unwrap().unwrap();
    let chosen = PowerAllocation::new(
        p_t.power
            .iter()
            .zip(&p_c.power)
            .map(|(&a, &b)| v * a + (1.0 - v) * b)
            .collect(),
        leader,
    );
    Ok(LineSearchResult {
        chosen,
        v_star: v,
        rate_bits: rate,
        followers,
        skipped,
    })
}

/// Why a CRM run stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    /// The line search could not improve the true rate by `improvement_tol`.
    NoImprovement,
    /// The dual candidate coincides with the operating point: a fixed point
    /// of the belief/response dynamics.
    FixedPoint,
    MaxIter,
}

impl StopReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            StopReason::NoImprovement => "no_improvement",
            StopReason::FixedPoint => "fixed_point",
            StopReason::MaxIter => "max_iter",
        }
    }
}

/// One outer CRM iteration.
#[derive(Debug, Clone)]
pub struct CrmIteration {
    pub belief: Belief,
    pub sc1: bool,
    /// Dual-solve candidate under the iteration's belief.
    pub candidate: PowerAllocation,
    /// Point adopted after the line search.
    pub chosen: PowerAllocation,
    pub v_star: f64,
    /// Leader's true rate at the iteration's start, in bits.
    pub rate_start_bits: f64,
    /// Leader's true rate at `chosen`, in bits.
    pub rate_after_bits: f64,
    /// Rates of users `1..K` at `chosen`, in bits.
    pub follower_rates_bits: Vec<f64>,
    /// Max-norm of the belief's consistency residual at `chosen`.
    pub residual_max_norm: f64,
    pub eta: f64,
    pub duality_gap_nats: f64,
    pub clamp_warnings: u32,
    pub kink_bins: u32,
    pub skipped_candidates: u32,
}

/// Full record of a CRM run.
#[derive(Debug, Clone)]
pub struct CrmTrace {
    pub iterations: Vec<CrmIteration>,
    pub stop_reason: StopReason,
    /// True when the run ended at a certified conjectural equilibrium:
    /// candidate == operating point and consistency residual <= 1e-6.
    pub converged_to_ce: bool,
    pub final_allocation: PowerAllocation,
    /// All users' rates at the final point, in bits.
    pub final_rates_bits: Vec<f64>,
    /// Leader allocation and all users' rates at the starting equilibrium.
    pub ne_allocation: PowerAllocation,
    pub ne_rates_bits: Vec<f64>,
    /// Total negative-beta clamps across iterations.
    pub warnings: u32,
}

impl CrmTrace {
    pub fn num_iterations(&self) -> usize {
        self.iterations.len()
    }

    /// Leader's rate at the starting equilibrium, in bits.
    pub fn ne_rate_bits(&self) -> f64 {
        self.ne_rates_bits[0]
    }

    /// Leader's final rate, in bits.
    pub fn final_rate_bits(&self) -> f64 {
        self.final_rates_bits[0]
    }
}

const FIXED_POINT_TOL: f64 = 1e-8;
const CE_RESIDUAL_TOL: f64 = 1e-6;

fn all_rates(inst: &GameInstance, allocations: &[PowerAllocation]) -> Vec<f64> {
    (0..inst.num_users)
        .map(|k| achievable_rate(inst, allocations, k))
        .collect()
}

/// Runs conjecture-based rate maximization for user 0.
///
/// Starts from user 0's allocation at the iterative water-filling
/// equilibrium (which must converge) and loops: measure stationary
/// interference, rebuild the tangent belief, solve the conjectured-rate
/// problem in the dual (inside the trust box when configured), line-search
/// the true rate toward the candidate, advance. Stops at a fixed point of
/// the dynamics (candidate equals the operating point within 1e-8, certified
/// as a conjectural equilibrium when the consistency residual is within
/// 1e-6), when an iteration improves the true rate by less than
/// `improvement_tol`, or at `max_outer_iter`.
pub fn crm(inst: &GameInstance, opts: &CrmOptions) -> Result<CrmTrace> {
    opts.validate()?;
    let iw = IwOptions::default();
    let leader = 0usize;
    let n_bins = inst.num_bins;
    let budget = inst.budget(leader);
    let sigma1: Vec<f64> = inst.noise_row(leader).to_vec();
    let eps = opts.fd_eps.unwrap_or(0.85 * budget / n_bins as f64);

    let ne = iterate_waterfilling(inst, None, None, &iw)?;
    if !ne.converged {
        return Err(Error::LowerLevelDiverged {
            iterations: ne.iterations,
            residual: ne.residual,
        });
    }
    let ne_rates = all_rates(inst, &ne.allocations);
    let ne_allocation = ne.allocations[leader].clone();

    let mut p_t = ne_allocation.clone();
    let mut followers_t = solve_followers(inst, leader, &p_t, &iw)?;
    let mut rate_t = achievable_rate(inst, &followers_t.allocations, leader);

    let mut iterations: Vec<CrmIteration> = Vec::new();
    let mut stop_reason = StopReason::MaxIter;
    let mut converged_to_ce = false;
    let mut warnings = 0u32;

    for _t in 0..opts.max_outer_iter {
        let interference = stationary_interference(inst, &followers_t.allocations, leader);
        let derivatives = match opts.fd_mode {
            FdMode::Batch => estimate_derivatives_batch(inst, &p_t, eps, &iw)?,
            FdMode::PerBin => estimate_derivatives_exact(inst, &p_t, eps, &iw)?,
        };
        let kink_bins = derivatives.iter().filter(|d| d.is_kinked()).count() as u32;
        let update = update_belief(&interference, &p_t, &derivatives);
        let clamp_warnings = update.clamped_bins.len() as u32;
        warnings += clamp_warnings;
        let belief = update.belief;
        let sc1 = check_sc1(&sigma1, &belief).0;

        let dual = dual_bisection(&sigma1, &belief, budget, opts, Some(&p_t))?;
        let candidate = dual.allocation.clone();

        if p_t.max_norm_distance(&candidate) <= FIXED_POINT_TOL {
            let residual = ce_residual(inst, &belief, &p_t, &iw)?;
            let residual_max = residual.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            iterations.push(CrmIteration {
                belief,
                sc1,
                candidate,
                chosen: p_t.clone(),
                v_star: 1.0,
                rate_start_bits: rate_t,
                rate_after_bits: rate_t,
                follower_rates_bits: all_rates(inst, &followers_t.allocations)[1..].to_vec(),
                residual_max_norm: residual_max,
                eta: dual.eta,
                duality_gap_nats: dual.duality_gap_nats,
                clamp_warnings,
                kink_bins,
                skipped_candidates: 0,
            });
            stop_reason = StopReason::FixedPoint;
            converged_to_ce = residual_max <= CE_RESIDUAL_TOL;
            break;
        }

        let ls = line_search(inst, &p_t, &candidate, opts, &iw)?;
        let improvement = ls.rate_bits - rate_t;

        if improvement < opts.improvement_tol {
            // No move worth making: the play stays at the current point
            // rather than adopting a below-tolerance step.
            let residual = ce_residual(inst, &belief, &p_t, &iw)?;
            let residual_max = residual.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            iterations.push(CrmIteration {
                belief,
                sc1,
                candidate,
                chosen: p_t.clone(),
                v_star: 1.0,
                rate_start_bits: rate_t,
                rate_after_bits: rate_t,
                follower_rates_bits: all_rates(inst, &followers_t.allocations)[1..].to_vec(),
                residual_max_norm: residual_max,
                eta: dual.eta,
                duality_gap_nats: dual.duality_gap_nats,
                clamp_warnings,
                kink_bins,
                skipped_candidates: ls.skipped,
            });
            stop_reason = StopReason::NoImprovement;
            break;
        }

        let interference_s = stationary_interference(inst, &ls.followers.allocations, leader);
        let residual_max = interference_s
            .iter()
            .enumerate()
            .map(|(n, &i)| (i - belief.conjectured(n, ls.chosen.power[n])).abs())
            .fold(0.0f64, f64::max);

        iterations.push(CrmIteration {
            belief,
            sc1,
            candidate,
            chosen: ls.chosen.clone(),
            v_star: ls.v_star,
            rate_start_bits: rate_t,
            rate_after_bits: ls.rate_bits,
            follower_rates_bits: all_rates(inst, &ls.followers.allocations)[1..].to_vec(),
            residual_max_norm: residual_max,
            eta: dual.eta,
            duality_gap_nats: dual.duality_gap_nats,
            clamp_warnings,
            kink_bins,
            skipped_candidates: ls.skipped,
        });

        p_t = ls.chosen;
        rate_t = ls.rate_bits;
        followers_t = ls.followers;
    }

    let final_rates = all_rates(inst, &followers_t.allocations);
    Ok(CrmTrace {
        iterations,
        stop_reason,
        converged_to_ce,
        final_allocation: p_t,
        final_rates_bits: final_rates,
        ne_allocation,
        ne_rates_bits: ne_rates,
        warnings,
    })
}

/// A grid-search Stackelberg outcome.
#[derive(Debug, Clone)]
pub struct SeOutcome {
    pub leader_allocation: PowerAllocation,
    /// All users' rates at the leader optimum, in bits.
    pub rates_bits: Vec<f64>,
    /// Grid points whose follower subgame failed to converge (skipped).
    pub skipped: u32,
    /// Grid points evaluated.
    pub evaluated: usize,
}

impl SeOutcome {
    pub fn leader_rate_bits(&self) -> f64 {
        self.rates_bits[0]
    }
}

fn compositions(units: usize, bins: usize) -> Vec<Vec<usize>> {
    fn rec(units: usize, bins: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if bins == 1 {
            prefix.push(units);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for u in 0..=units {
            prefix.push(u);
            rec(units - u, bins - 1, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(units, bins, &mut Vec::new(), &mut out);
    out
}

/// Exhaustive Stackelberg search for user 0 on desk-scale instances
/// (`N <= 4`, `K <= 3`, uniqueness screen passing).
///
/// Enumerates the leader's allocations on the simplex grid
/// `{sum_n P^n = budget, P^n in budget * {0, 1/resolution, .., 1}}` — the
/// budget binds at the leader optimum because the leader's rate strictly
/// increases in own power for fixed followers — plus, for safety, the same
/// grids at three fractional budget levels (1/4, 1/2, 3/4). Each grid point
/// costs one follower-subgame solve.
pub fn grid_search_se(inst: &GameInstance, resolution: usize) -> Result<SeOutcome> {
    if inst.num_bins > 4 || inst.num_users > 3 {
        return Err(Error::DeskScaleExceeded {
            users: inst.num_users,
            bins: inst.num_bins,
        });
    }
    if resolution == 0 {
        return Err(Error::InvalidOptions("resolution must be positive".into()));
    }
    let (unique, worst) = check_uniqueness_condition(inst);
    if !unique {
        return Err(Error::InvalidInstance(format!(
            "uniqueness screen failed (worst row sum {worst:.3}); follower response may be multivalued"
        )));
    }

    let leader = 0usize;
    let budget = inst.budget(leader);
    let step = budget / resolution as f64;
    let iw = IwOptions::default();

    let mut grid: Vec<Vec<f64>> = Vec::new();
    for units in [
        resolution,
        (3 * resolution) / 4,
        resolution / 2,
        resolution / 4,
    ] {
        if units == 0 {
            continue;
        }
        for comp in compositions(units, inst.num_bins) {
            grid.push(comp.into_iter().map(|u| u as f64 * step).collect());
        }
    }

    let evals: Vec<Option<(f64, usize)>> = grid
        .par_iter()
        .enumerate()
        .map(|(idx, power)| {
            let alloc = PowerAllocation::new(power.clone(), leader);
            match solve_followers(inst, leader, &alloc, &iw) {
                Ok(outcome) => Some((achievable_rate(inst, &outcome.allocations, leader), idx)),
                Err(_) => None,
            }
        })
        .collect();

    let mut skipped = 0u32;
    let mut best: Option<(f64, usize)> = None;
    for eval in &evals {
        match eval {
            Some((rate, idx)) => {
                if best.is_none_or(|(r, _)| *rate > r) {
                    best = Some((*rate, *idx));
                }
            }
            None => skipped += 1,
        }
    }
    let (_, best_idx) = best.ok_or(Error::LowerLevelDiverged {
        iterations: iw.max_iter,
        residual: f64::NAN,
    })?;

    let leader_allocation = PowerAllocation::new(grid[best_idx].clone(), leader);
    let outcome = solve_followers(inst, leader, &leader_allocation, &iw)?;
    let rates = all_rates(inst, &outcome.allocations);
    Ok(SeOutcome {
        leader_allocation,
        rates_bits: rates,
        skipped,
        evaluated: grid.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::waterfill::waterfill_best_response;
    use ndarray::{Array2, Array3};

    fn flat_instance(k_users: usize, n_bins: usize, sigma: f64, alpha: f64, budget: f64) -> GameInstance {
        let noise = Array2::from_elem((k_users, n_bins), sigma);
        let mut cross = Array3::zeros((k_users, k_users, n_bins));
        for j in 0..k_users {
            for k in 0..k_users {
                if j != k {
                    for n in 0..n_bins {
                        cross[[j, k, n]] = alpha;
                    }
                }
            }
        }
        GameInstance::new(noise, cross, vec![budget; k_users]).unwrap()
    }

    #[test]
    fn conjectured_rate_reduces_to_fixed_interference() {
        let belief = Belief::new(vec![0.7, 0.2], vec![0.0, 0.0]).unwrap();
        let p = PowerAllocation::new(vec![1.0, 2.0], 0);
        let r = conjectured_rate(&[1.0, 0.5], &belief, &p).unwrap();
        let expected = (1.0f64 + 1.0 / 1.7).ln() + (1.0f64 + 2.0 / 0.7).ln();
        assert!((r - expected).abs() < 1e-14);
    }

    #[test]
    fn conjectured_rate_zero_power_is_zero() {
        let belief = Belief::new(vec![0.7, 0.2], vec![0.1, -0.3]).unwrap();
        let p = PowerAllocation::zeros(2, 0);
        assert_eq!(conjectured_rate(&[1.0, 0.5], &belief, &p).unwrap(), 0.0);
    }

    #[test]
    fn conjectured_rate_at_domain_boundary() {
        // sigma 1, beta 1, gamma 0.5, P 2: conjectured interference hits 0.
        let belief = Belief::new(vec![1.0], vec![0.5]).unwrap();
        let p = PowerAllocation::new(vec![2.0], 0);
        let r = conjectured_rate(&[1.0], &belief, &p).unwrap();
        assert!((r - 3.0f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn conjectured_rate_rejects_domain_violation() {
        let belief = Belief::new(vec![1.0], vec![0.5]).unwrap();
        let p = PowerAllocation::new(vec![3.0], 0);
        assert!(matches!(
            conjectured_rate(&[1.0], &belief, &p),
            Err(Error::BeliefDomain { bin: 0, .. })
        ));
    }

    #[test]
    fn inner_max_waterfilling_limit() {
        // gamma = 0: P = 1/eta - sigma.
        let p = inner_max_per_bin(1.0, 0.0, 0.0, 0.25, None);
        assert!((p - 3.0).abs() < 1e-12);
    }

    #[test]
    fn inner_max_shuts_off_when_price_exceeds_marginal_value() {
        let p = inner_max_per_bin(1.0, 0.0, 0.0, 1.5, None);
        assert_eq!(p, 0.0);
    }

    #[test]
    fn inner_max_takes_domain_endpoint_when_objective_increases() {
        // sigma 1, beta 1, gamma 0.5: domain cap at P = 2, and the rate term
        // strictly increases, so a vanishing price puts us on the cap.
        let p = inner_max_per_bin(1.0, 1.0, 0.5, 1e-6, None);
        assert!((p - 2.0).abs() < 1e-12);
        // Dense 1-D oracle over the same interval.
        let obj = |x: f64| bin_objective(1.0, 1.0, 0.5, 1e-6, x);
        let grid_best = (0..=20_000)
            .map(|i| i as f64 * 1e-4)
            .map(|x| (obj(x), x))
            .fold((f64::NEG_INFINITY, 0.0), |a, b| if b.0 > a.0 { b } else { a });
        assert!((grid_best.1 - 2.0).abs() < 2e-4);
    }

    #[test]
    fn dual_bisection_matches_waterfilling_for_trivial_belief() {
        let sigma = vec![0.8, 1.4, 0.3, 2.2];
        let belief = Belief::new(vec![0.0; 4], vec![0.0; 4]).unwrap();
        let solve = dual_bisection(&sigma, &belief, 3.0, &CrmOptions::default(), None).unwrap();
        let wf = waterfill_best_response(&sigma, 3.0).unwrap();
        let dist = solve.allocation.max_norm_distance(&wf.allocation);
        assert!(dist < 1e-7, "dual vs waterfilling distance {dist}");
        assert!(solve.duality_gap_nats.abs() < 1e-6);
    }

    #[test]
    fn dual_bisection_caps_at_domain_when_budget_is_loose() {
        // Single bin with cap beta/gamma = 2 and budget 10: the whole domain
        // is affordable, so the solve returns the cap with zero price.
        let belief = Belief::new(vec![1.0], vec![0.5]).unwrap();
        let solve = dual_bisection(&[1.0], &belief, 10.0, &CrmOptions::default(), None).unwrap();
        assert!((solve.allocation.power[0] - 2.0).abs() < 1e-12);
        assert_eq!(solve.eta, 0.0);
    }

    #[test]
    fn dual_bisection_matches_dense_grid_on_two_bins() {
        // SC1-passing belief; oracle is a dense sweep of P0 with P1 taking
        // the rest of the budget (the optimum spends everything when no cap
        // binds, since the objective increases in each coordinate).
        let sigma = [1.0, 0.6];
        let belief = Belief::new(vec![0.4, 0.3], vec![0.2, -0.4]).unwrap();
        let budget = 2.0;
        let opts = CrmOptions::default();
        let solve = dual_bisection(&sigma, &belief, budget, &opts, None).unwrap();

        let steps = 2000;
        let mut best = f64::NEG_INFINITY;
        for i in 0..=steps {
            let p0 = budget * i as f64 / steps as f64;
            let p1 = budget - p0;
            let cap0 = belief.domain_cap(0);
            if p0 > cap0 {
                continue;
            }
            let alloc = PowerAllocation::new(vec![p0, p1], 0);
            if let Ok(r) = conjectured_rate(&sigma, &belief, &alloc) {
                best = best.max(r);
            }
        }
        assert!(
            (solve.primal_nats - best).abs() < 1e-4,
            "dual {} vs grid {best}",
            solve.primal_nats
        );
    }

    #[test]
    fn line_search_stays_put_for_identical_points() {
        let inst = flat_instance(2, 3, 1.0, 0.4, 2.0);
        let p = PowerAllocation::new(vec![1.0, 0.5, 0.5], 0);
        let ls = line_search(&inst, &p, &p.clone(), &CrmOptions::default(), &IwOptions::default())
            .unwrap();
        assert_eq!(ls.v_star, 1.0);
        assert_eq!(ls.chosen.power, p.power);
    }

    #[test]
    fn line_search_decoupled_game_picks_better_endpoint() {
        // Zero cross gains: the rate depends only on the leader's own
        // allocation, and the water-filling point beats the uniform one.
        let mut inst = flat_instance(2, 2, 1.0, 0.0, 2.0);
        inst.noise[[0, 1]] = 3.0;
        let wf = waterfill_best_response(&[1.0, 3.0], 2.0).unwrap();
        let uniform = PowerAllocation::new(vec![1.0, 1.0], 0);
        let ls = line_search(
            &inst,
            &uniform,
            &wf.allocation,
            &CrmOptions::default(),
            &IwOptions::default(),
        )
        .unwrap();
        assert_eq!(ls.v_star, 0.0, "candidate endpoint should win");
        assert_eq!(ls.chosen.power, wf.allocation.power);
    }

    #[test]
    fn line_search_tracks_dense_reference_grid() {
        let inst = flat_instance(2, 2, 0.5, 0.45, 2.0);
        let p_t = PowerAllocation::new(vec![1.0, 1.0], 0);
        let p_c = PowerAllocation::new(vec![2.0, 0.0], 0);
        let iw = IwOptions::default();
        let coarse = line_search(&inst, &p_t, &p_c, &CrmOptions::default(), &iw).unwrap();
        let fine = line_search(
            &inst,
            &p_t,
            &p_c,
            &CrmOptions {
                line_search_points: 1001,
                ..CrmOptions::default()
            },
            &iw,
        )
        .unwrap();
        assert!((coarse.v_star - fine.v_star).abs() <= 0.01 + 1e-12);
        assert!(fine.rate_bits - coarse.rate_bits <= 1e-3);
    }

    #[test]
    fn crm_zero_cross_gain_certifies_equilibrium_immediately() {
        let mut inst = flat_instance(2, 4, 1.0, 0.0, 2.0);
        inst.noise[[0, 2]] = 2.0;
        inst.noise[[0, 3]] = 4.0;
        let trace = crm(&inst, &CrmOptions::default()).unwrap();
        assert_eq!(trace.num_iterations(), 1);
        // With a zero derivative the conjectured problem is the leader's own
        // water-filling, whose solution is already the equilibrium point.
        assert_eq!(trace.stop_reason, StopReason::FixedPoint);
        assert!(trace.converged_to_ce);
        assert!(trace.final_allocation.max_norm_distance(&trace.ne_allocation) <= 1e-8);
        assert!((trace.final_rate_bits() - trace.ne_rate_bits()).abs() < 1e-9);
    }

    #[test]
    fn crm_trace_rate_is_monotone() {
        let inst = flat_instance(2, 4, 0.2, 0.6, 4.0);
        let trace = crm(&inst, &CrmOptions::default()).unwrap();
        let mut last = trace.ne_rate_bits();
        for it in &trace.iterations {
            assert!(it.rate_after_bits >= it.rate_start_bits - 1e-12);
            assert!(it.rate_start_bits >= last - 1e-12);
            last = it.rate_after_bits;
        }
        assert!(trace.final_rate_bits() >= trace.ne_rate_bits() - 1e-12);
    }

    #[test]
    fn grid_se_equals_solo_waterfilling_when_decoupled() {
        let mut inst = flat_instance(2, 2, 1.0, 0.0, 2.0);
        inst.noise[[0, 1]] = 3.0;
        let se = grid_search_se(&inst, 200).unwrap();
        let wf = waterfill_best_response(&[1.0, 3.0], 2.0).unwrap();
        assert!(se.leader_allocation.max_norm_distance(&wf.allocation) < 1e-9);
        let ne = iterate_waterfilling(&inst, None, None, &IwOptions::default()).unwrap();
        let ne_rate = achievable_rate(&inst, &ne.allocations, 0);
        assert!((se.leader_rate_bits() - ne_rate).abs() < 1e-9);
    }

    #[test]
    fn grid_se_single_bin_equals_full_power() {
        let inst = flat_instance(2, 1, 1.0, 0.5, 2.0);
        let se = grid_search_se(&inst, 50).unwrap();
        assert!((se.leader_allocation.power[0] - 2.0).abs() < 1e-12);
        let ne = iterate_waterfilling(&inst, None, None, &IwOptions::default()).unwrap();
        let ne_rate = achievable_rate(&inst, &ne.allocations, 0);
        assert!((se.leader_rate_bits() - ne_rate).abs() < 1e-12);
    }

    #[test]
    fn grid_se_rejects_large_instances() {
        let inst = flat_instance(2, 5, 1.0, 0.5, 2.0);
        assert!(matches!(
            grid_search_se(&inst, 10),
            Err(Error::DeskScaleExceeded { .. })
        ));
    }

    #[test]
    fn grid_se_refinement_is_consistent() {
        let inst = flat_instance(2, 2, 0.4, 0.5, 2.0);
        let coarse = grid_search_se(&inst, 400).unwrap();
        let fine = grid_search_se(&inst, 800).unwrap();
        assert!((coarse.leader_rate_bits() - fine.leader_rate_bits()).abs() < 1e-3);
    }

    #[test]
    fn dual_solver_satisfies_kkt_under_sc1() {
        // Stationarity of the per-bin Lagrangian at the recovered price on
        // interior-active bins.
        let sigma = vec![0.9, 0.5, 1.3];
        let belief = Belief::new(vec![0.3, 0.2, 0.1], vec![0.1, -0.5, 0.3]).unwrap();
        assert!(check_sc1(&sigma, &belief).0);
        let solve = dual_bisection(&sigma, &belief, 4.0, &CrmOptions::default(), None).unwrap();
        for (n, &sig) in sigma.iter().enumerate() {
            let p = solve.allocation.power[n];
            let cap = belief.domain_cap(n);
            if p > 1e-7 && p < cap - 1e-7 {
                let s = sig + belief.beta[n];
                let g = belief.gamma[n];
                let grad = (1.0 - g) / (s + (1.0 - g) * p) + g / (s - g * p);
                assert!(
                    (grad - solve.eta).abs() < 1e-6,
                    "bin {n}: grad {grad} vs eta {}",
                    solve.eta
                );
            }
        }
    }
}
