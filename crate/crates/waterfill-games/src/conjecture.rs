//! Linear beliefs about stationary interference.
//!
//! Throughout the crate the foresighted user is **user 0**; users `1..K` are
//! myopic water-fillers. Once the myopic users re-equilibrate to a committed
//! leader allocation `P`, the interference they cause the leader in bin `n`
//! is locally affine in `P^n`: the follower best responses in a bin solve a
//! linear system `(I + G) q + g P^n = nu` over the bin's active followers, so
//!
//! ```text
//! dI^n / dP^n = -h (I + G)^{-1} g        (same bin)
//! dI^n / dP^m ~= 0                       (other bins, for large N)
//! ```
//!
//! where `h` holds the follower-to-leader gains, `g` the leader-to-follower
//! gains, and `G` the follower-to-follower coupling of the bin's active set.
//! The leader models this with the per-bin linear belief
//! `I_tilde^n(P) = beta^n - gamma^n P`, built as the tangent of the measured
//! interference: `beta^n = I^n - P^n dI^n/dP^n`, `gamma^n = -dI^n/dP^n`.
//!
//! [`closed_form_derivative`] evaluates the matrix formula from known gains;
//! [`estimate_derivative_fd`] measures the same slope without any knowledge
//! of the rivals, by perturbing the leader's power and re-solving the
//! follower subgame. [`check_sc1`] screens the resulting conjectured-rate
//! problem for concavity, and [`ce_residual`] measures how far a
//! belief/allocation pair is from consistency (zero residual plus optimality
//! of the allocation under the belief is a conjectural equilibrium).

use nalgebra::{DMatrix, DVector};

use crate::equilibrium::{solve_followers_relaxed, IwOptions, NashOutcome};
use crate::error::{Error, Result};
use crate::instance::GameInstance;
use crate::waterfill::{stationary_interference, PowerAllocation};

/// Per-bin linear conjecture `I_tilde^n(P) = beta^n - gamma^n P`.
///
/// The belief's per-bin domain is `{P >= 0} ∩ {beta^n - gamma^n P >= 0}`,
/// which is non-empty exactly when `beta^n >= 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Belief {
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
}

impl Belief {
    /// Builds a belief, rejecting negative `beta` (empty domain).
    pub fn new(beta: Vec<f64>, gamma: Vec<f64>) -> Result<Self> {
        if beta.len() != gamma.len() {
            return Err(Error::InvalidInstance(format!(
                "belief has {} beta but {} gamma entries",
                beta.len(),
                gamma.len()
            )));
        }
        if let Some((n, &b)) = beta.iter().enumerate().find(|(_, b)| **b < 0.0 || b.is_nan()) {
            return Err(Error::InvalidInstance(format!(
                "belief domain is empty in bin {n}: beta = {b}"
            )));
        }
        Ok(Belief { beta, gamma })
    }

    /// The equilibrium-as-given belief: `beta = I`, `gamma = 0` (a myopic
    /// user's view of fixed interference).
    pub fn from_fixed_interference(interference: &[f64]) -> Self {
        Belief {
            beta: interference.to_vec(),
            gamma: vec![0.0; interference.len()],
        }
    }

    pub fn num_bins(&self) -> usize {
        self.beta.len()
    }

    /// Conjectured interference in bin `n` at leader power `p`.
    pub fn conjectured(&self, n: usize, p: f64) -> f64 {
        self.beta[n] - self.gamma[n] * p
    }

    /// Upper end of the belief domain in bin `n` (`+inf` when `gamma <= 0`).
    pub fn domain_cap(&self, n: usize) -> f64 {
        if self.gamma[n] > 0.0 {
            self.beta[n] / self.gamma[n]
        } else {
            f64::INFINITY
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DerivMethod {
    ClosedForm,
    FiniteDifference,
}

/// A per-bin estimate of `dI^n/dP^n`.
///
/// `left_value`/`right_value` are present (only together) when the one-sided
/// finite differences disagree, i.e. the operating point sits on a kink of
/// the piecewise-affine follower response.
#[derive(Debug, Clone, Copy)]
pub struct DerivativeEstimate {
    pub value: f64,
    pub left_value: Option<f64>,
    pub right_value: Option<f64>,
    pub method: DerivMethod,
}

impl DerivativeEstimate {
    /// An estimate from an externally computed slope (e.g. the closed form).
    pub fn from_value(value: f64, method: DerivMethod) -> Self {
        DerivativeEstimate {
            value,
            left_value: None,
            right_value: None,
            method,
        }
    }

    fn two_sided(value: f64) -> Self {
        Self::from_value(value, DerivMethod::FiniteDifference)
    }

    fn kinked(value: f64, left: f64, right: f64) -> Self {
        DerivativeEstimate {
            value,
            left_value: Some(left),
            right_value: Some(right),
            method: DerivMethod::FiniteDifference,
        }
    }

    pub fn is_kinked(&self) -> bool {
        self.left_value.is_some()
    }
}

/// Followers (users != leader) with strictly positive power in `bin` at the
/// given subgame outcome; the active set fed to [`closed_form_derivative`].
pub fn active_followers(outcome: &NashOutcome, leader: usize, bin: usize) -> Vec<usize> {
    outcome
        .allocations
        .iter()
        .filter(|a| a.owner != leader && a.power[bin] > 0.0)
        .map(|a| a.owner)
        .collect()
}

/// Evaluates `-h (I + G)^{-1} g` for one bin over the given active follower
/// set. An empty active set maps to 0: with no follower transmitting in the
/// bin, the response is locally constant.
///
/// Errors with the offending bin if the restricted `(I + G)` is singular
/// (cannot happen while the uniqueness screen holds).
pub fn closed_form_derivative(inst: &GameInstance, bin: usize, active: &[usize]) -> Result<f64> {
    if active.is_empty() {
        return Ok(0.0);
    }
    let leader = 0usize;
    debug_assert!(active.iter().all(|&i| i != leader && i < inst.num_users));

    let m = active.len();
    // Row r is follower active[r]'s response equation: coupling from the
    // other active followers, forcing from the leader.
    let i_plus_g = DMatrix::from_fn(m, m, |r, c| {
        if r == c {
            1.0
        } else {
            inst.gain(active[c], active[r], bin)
        }
    });
    let g = DVector::from_fn(m, |r, _| inst.gain(leader, active[r], bin));
    let h = DVector::from_fn(m, |c, _| inst.gain(active[c], leader, bin));

    let lu = i_plus_g.lu();
    match lu.solve(&g) {
        Some(x) => Ok(-h.dot(&x)),
        None => Err(Error::SingularBinMatrix { bin }),
    }
}

/// Leader's interference at a converged follower subgame.
fn leader_interference(inst: &GameInstance, outcome: &NashOutcome, leader: usize) -> Vec<f64> {
    stationary_interference(inst, &outcome.allocations, leader)
}

fn solve_and_measure(
    inst: &GameInstance,
    leader: usize,
    alloc: &PowerAllocation,
    iw: &IwOptions,
) -> Result<Vec<f64>> {
    let out = solve_followers_relaxed(inst, leader, alloc, iw)?;
    Ok(leader_interference(inst, &out, leader))
}

/// One-sided estimates disagree beyond this and the bin is flagged as a kink.
fn kink_threshold(eps: f64, forward: f64, backward: f64) -> f64 {
    10.0 * eps * (forward.abs() + backward.abs() + 1.0)
}

/// Central-difference estimate of `dI^n/dP^n` for one bin, probing the
/// follower response map by re-solving the subgame at `P^n +/- eps`.
///
/// The perturbed allocations may exceed the leader's budget by `eps`; the
/// probe measures the followers' response, not the leader's feasibility.
/// Falls back to a forward difference when `P^n - eps < 0`. When the forward
/// and backward differences disagree beyond `10 eps (|f| + |b| + 1)`, both
/// one-sided slopes are reported.
pub fn estimate_derivative_fd(
    inst: &GameInstance,
    p1: &PowerAllocation,
    bin: usize,
    eps: f64,
    iw: &IwOptions,
) -> Result<DerivativeEstimate> {
    debug_assert!(eps > 0.0);
    let leader = p1.owner;
    let base = solve_and_measure(inst, leader, p1, iw)?;

    let mut plus = p1.clone();
    plus.power[bin] += eps;
    let i_plus = solve_and_measure(inst, leader, &plus, iw)?;

    if p1.power[bin] - eps < 0.0 {
        let forward = (i_plus[bin] - base[bin]) / eps;
        return Ok(DerivativeEstimate::two_sided(forward));
    }

    let mut minus = p1.clone();
    minus.power[bin] -= eps;
    let i_minus = solve_and_measure(inst, leader, &minus, iw)?;

    let central = (i_plus[bin] - i_minus[bin]) / (2.0 * eps);
    let forward = (i_plus[bin] - base[bin]) / eps;
    let backward = (base[bin] - i_minus[bin]) / eps;
    if (forward - backward).abs() > kink_threshold(eps, forward, backward) {
        Ok(DerivativeEstimate::kinked(central, backward, forward))
    } else {
        Ok(DerivativeEstimate::two_sided(central))
    }
}

/// Batch estimate: probes all bins with one balanced dither (two follower
/// solves beyond the baseline) instead of 2N per-bin solves.
///
/// The dither alternates signs across bins (`+eps` on even bins, `-eps` on
/// odd), and the second probe flips it. Because the pattern sums to ~0, the
/// followers' water levels — which respond to the *aggregate* effective
/// noise — stay put to first order, and each bin's interference change
/// isolates the own-bin slope. A same-signed perturbation would not work:
/// budget-bound followers respond to a uniform shift by not moving at all,
/// so the per-bin slopes cancel out of the measurement. Bins whose one-sided
/// slopes disagree (kinks) are re-probed individually via
/// [`estimate_derivative_fd`].
pub fn estimate_derivatives_batch(
    inst: &GameInstance,
    p1: &PowerAllocation,
    eps: f64,
    iw: &IwOptions,
) -> Result<Vec<DerivativeEstimate>> {
    debug_assert!(eps > 0.0);
    let leader = p1.owner;
    let n_bins = inst.num_bins;

    let base = solve_and_measure(inst, leader, p1, iw)?;

    // probe_a gets +eps on even bins, probe_b on odd bins; the opposite leg
    // clips at zero where the current power is below eps.
    let mut probe_a = p1.clone();
    let mut probe_b = p1.clone();
    for n in 0..n_bins {
        let (up, down) = if n % 2 == 0 {
            (&mut probe_a, &mut probe_b)
        } else {
            (&mut probe_b, &mut probe_a)
        };
        up.power[n] = p1.power[n] + eps;
        down.power[n] = (p1.power[n] - eps).max(0.0);
    }
    let i_a = solve_and_measure(inst, leader, &probe_a, iw)?;
    let i_b = solve_and_measure(inst, leader, &probe_b, iw)?;

    let mut estimates = Vec::with_capacity(n_bins);
    for n in 0..n_bins {
        let (i_up, i_down, p_down) = if n % 2 == 0 {
            (i_a[n], i_b[n], probe_b.power[n])
        } else {
            (i_b[n], i_a[n], probe_a.power[n])
        };
        let down_span = p1.power[n] - p_down;
        if down_span <= 0.0 {
            estimates.push(DerivativeEstimate::two_sided((i_up - base[n]) / eps));
            continue;
        }
        let central = (i_up - i_down) / (eps + down_span);
        let forward = (i_up - base[n]) / eps;
        let backward = (base[n] - i_down) / down_span;
        if (forward - backward).abs() > kink_threshold(eps, forward, backward) {
            estimates.push(estimate_derivative_fd(inst, p1, n, eps, iw)?);
        } else {
            estimates.push(DerivativeEstimate::two_sided(central));
        }
    }
    Ok(estimates)
}

/// Exact per-bin mode: probes every bin individually (2N follower solves
/// plus the baseline). The validation-grade counterpart of
/// [`estimate_derivatives_batch`].
pub fn estimate_derivatives_exact(
    inst: &GameInstance,
    p1: &PowerAllocation,
    eps: f64,
    iw: &IwOptions,
) -> Result<Vec<DerivativeEstimate>> {
    debug_assert!(eps > 0.0);
    let leader = p1.owner;
    let base = solve_and_measure(inst, leader, p1, iw)?;

    let mut estimates = Vec::with_capacity(inst.num_bins);
    for n in 0..inst.num_bins {
        let mut plus = p1.clone();
        plus.power[n] += eps;
        let i_plus = solve_and_measure(inst, leader, &plus, iw)?;

        if p1.power[n] - eps < 0.0 {
            estimates.push(DerivativeEstimate::two_sided((i_plus[n] - base[n]) / eps));
            continue;
        }
        let mut minus = p1.clone();
        minus.power[n] -= eps;
        let i_minus = solve_and_measure(inst, leader, &minus, iw)?;

        let central = (i_plus[n] - i_minus[n]) / (2.0 * eps);
        let forward = (i_plus[n] - base[n]) / eps;
        let backward = (base[n] - i_minus[n]) / eps;
        if (forward - backward).abs() > kink_threshold(eps, forward, backward) {
            estimates.push(DerivativeEstimate::kinked(central, backward, forward));
        } else {
            estimates.push(DerivativeEstimate::two_sided(central));
        }
    }
    Ok(estimates)
}

/// Result of a tangent-belief update.
#[derive(Debug, Clone)]
pub struct BeliefUpdate {
    pub belief: Belief,
    /// Bins where a noisy derivative drove `beta` negative and it was clamped
    /// to 0 to keep the domain alive.
    pub clamped_bins: Vec<usize>,
}

/// Tangent-line belief at the operating point: `beta^n = I^n - P^n d^n`,
/// `gamma^n = -d^n`. Reproduces the measured interference exactly at `P^n`.
pub fn update_belief(
    interference: &[f64],
    p1: &PowerAllocation,
    derivatives: &[DerivativeEstimate],
) -> BeliefUpdate {
    debug_assert!(interference.iter().all(|&i| i >= 0.0));
    let mut beta = Vec::with_capacity(interference.len());
    let mut gamma = Vec::with_capacity(interference.len());
    let mut clamped = Vec::new();
    for (n, (&i, d)) in interference.iter().zip(derivatives).enumerate() {
        let b = i - p1.power[n] * d.value;
        if b < 0.0 {
            clamped.push(n);
            beta.push(0.0);
        } else {
            beta.push(b);
        }
        gamma.push(-d.value);
    }
    BeliefUpdate {
        belief: Belief { beta, gamma },
        clamped_bins: clamped,
    }
}

/// Concavity screen for the conjectured-rate objective: per bin,
/// `beta^n > 0` and `gamma^n < (1 - beta^n/sigma^n)/2`. Returns the
/// all-bins-pass flag and the per-bin margins
/// `gamma^n - (1 - beta^n/sigma^n)/2` (negative = pass).
pub fn check_sc1(sigma1: &[f64], belief: &Belief) -> (bool, Vec<f64>) {
    let mut all = true;
    let margins: Vec<f64> = sigma1
        .iter()
        .zip(belief.beta.iter().zip(&belief.gamma))
        .map(|(&s, (&b, &g))| {
            let margin = g - 0.5 * (1.0 - b / s);
            if !(b > 0.0 && margin < 0.0) {
                all = false;
            }
            margin
        })
        .collect();
    (all, margins)
}

/// Consistency residual `I^n(P) - (beta^n - gamma^n P^n)`: realized
/// stationary interference at the follower equilibrium for `p1`, minus the
/// conjectured interference. A max-norm of ~0 together with `p1` optimizing
/// the conjectured rate certifies a conjectural equilibrium.
pub fn ce_residual(
    inst: &GameInstance,
    belief: &Belief,
    p1: &PowerAllocation,
    iw: &IwOptions,
) -> Result<Vec<f64>> {
    let realized = solve_and_measure(inst, p1.owner, p1, iw)?;
    Ok(realized
        .iter()
        .enumerate()
        .map(|(n, &i)| i - belief.conjectured(n, p1.power[n]))
        .collect())
}
