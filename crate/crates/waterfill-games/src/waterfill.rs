//! Per-user rate evaluation and the single-user water-filling best response.
//!
//! Water-filling maximizes `sum_n ln(1 + P^n / sigma_eff^n)` subject to
//! `sum_n P^n <= budget`, `P^n >= 0`. The optimum is `P^n = max(nu -
//! sigma_eff^n, 0)` with the water level `nu` chosen so the budget binds (it
//! always binds: the objective is strictly increasing in every coordinate).
//! [`waterfill_best_response`] solves this exactly by sort-and-scan.
//!
//! Optimizers throughout the crate work in natural log; reported rates are in
//! bits (see [`achievable_rate`]). The argmax is the same either way.

use crate::error::{Error, Result};
use crate::instance::GameInstance;

/// Relative slack allowed on the budget feasibility check.
pub const FEASIBILITY_TOL: f64 = 1e-9;

/// One user's per-bin transmit PSD.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerAllocation {
    /// Per-bin powers, all non-negative.
    pub power: Vec<f64>,
    /// Index of the user holding this allocation.
    pub owner: usize,
}

impl PowerAllocation {
    pub fn new(power: Vec<f64>, owner: usize) -> Self {
        PowerAllocation { power, owner }
    }

    pub fn zeros(num_bins: usize, owner: usize) -> Self {
        PowerAllocation {
            power: vec![0.0; num_bins],
            owner,
        }
    }

    pub fn total(&self) -> f64 {
        self.power.iter().sum()
    }

    /// Checks non-negativity and the budget constraint of the owning user,
    /// with `FEASIBILITY_TOL` relative slack.
    pub fn validate(&self, inst: &GameInstance) -> Result<()> {
        if self.power.len() != inst.num_bins {
            return Err(Error::InfeasibleAllocation {
                user: self.owner,
                reason: format!(
                    "has {} bins, instance has {}",
                    self.power.len(),
                    inst.num_bins
                ),
            });
        }
        if let Some((n, &p)) = self
            .power
            .iter()
            .enumerate()
            .find(|(_, p)| **p < 0.0 || !p.is_finite())
        {
            return Err(Error::InfeasibleAllocation {
                user: self.owner,
                reason: format!("negative or non-finite power {p} in bin {n}"),
            });
        }
        let budget = inst.budget(self.owner);
        if self.total() > budget * (1.0 + FEASIBILITY_TOL) {
            return Err(Error::InfeasibleAllocation {
                user: self.owner,
                reason: format!("total power {} exceeds budget {budget}", self.total()),
            });
        }
        Ok(())
    }

    /// Max-norm distance between two allocations.
    pub fn max_norm_distance(&self, other: &PowerAllocation) -> f64 {
        self.power
            .iter()
            .zip(&other.power)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Outcome of a single water-filling solve.
#[derive(Debug, Clone)]
pub struct WaterfillResult {
    pub allocation: PowerAllocation,
    /// The common water level `nu`: active bins satisfy `P^n = nu - sigma_eff^n`.
    pub water_level: f64,
    /// Bins with strictly positive power, ascending.
    pub active_set: Vec<usize>,
}

/// Interference experienced by user `k` in each bin under the given
/// allocations: `I_k^n = sum_{i != k} alpha_ik^n P_i^n`.
///
/// When the other users' allocations are their equilibrium response this is
/// the *stationary* interference; the formula is the same either way.
pub fn stationary_interference(
    inst: &GameInstance,
    all_allocations: &[PowerAllocation],
    k: usize,
) -> Vec<f64> {
    let mut acc = vec![0.0; inst.num_bins];
    for alloc in all_allocations {
        let i = alloc.owner;
        if i == k {
            continue;
        }
        for (n, a) in acc.iter_mut().enumerate() {
            *a += inst.gain(i, k, n) * alloc.power[n];
        }
    }
    acc
}

/// Achievable rate of user `k` in bits (summed over bins):
/// `sum_n log2(1 + P_k^n / (sigma_k^n + I_k^n))`.
pub fn achievable_rate(inst: &GameInstance, all_allocations: &[PowerAllocation], k: usize) -> f64 {
    let interference = stationary_interference(inst, all_allocations, k);
    let own = all_allocations
        .iter()
        .find(|a| a.owner == k)
        .expect("allocation for user k present");
    own.power
        .iter()
        .zip(&interference)
        .enumerate()
        .map(|(n, (&p, &i))| (1.0 + p / (inst.noise[[k, n]] + i)).log2())
        .sum()
}

/// Same rate in nats.
#[cfg(test)]
pub(crate) fn rate_nats(sigma_eff: &[f64], power: &[f64]) -> f64 {
    power
        .iter()
        .zip(sigma_eff)
        .map(|(&p, &s)| (1.0 + p / s).ln())
        .sum()
}

/// Exact single-user water-filling by sort-and-scan.
///
/// Returns the unique maximizer of `sum_n ln(1 + P^n/sigma_eff^n)` under the
/// budget. Bins where `nu` equals `sigma_eff^n` exactly are treated as
/// inactive (power zero), consistent with `max(nu - sigma, 0)`.
pub fn waterfill_best_response(sigma_eff: &[f64], budget: f64) -> Result<WaterfillResult> {
    if budget <= 0.0 || !budget.is_finite() {
        return Err(Error::NonPositiveBudget(budget));
    }
    for (n, &s) in sigma_eff.iter().enumerate() {
        if s <= 0.0 || !s.is_finite() {
            return Err(Error::NonPositiveNoise { bin: n, value: s });
        }
    }

    let n_bins = sigma_eff.len();
    let mut order: Vec<usize> = (0..n_bins).collect();
    order.sort_unstable_by(|&a, &b| sigma_eff[a].total_cmp(&sigma_eff[b]));

    // Largest m such that nu_m = (budget + sum of m smallest sigmas)/m
    // exceeds the m-th smallest sigma. Once the test fails it fails for all
    // larger m, so scan and keep the last success.
    let mut prefix = 0.0;
    let mut water_level = f64::NAN;
    for (m, &idx) in order.iter().enumerate() {
        prefix += sigma_eff[idx];
        let nu = (budget + prefix) / (m + 1) as f64;
        if nu > sigma_eff[idx] {
            water_level = nu;
        } else {
            break;
        }
    }

    let mut power = vec![0.0; n_bins];
    let mut active_set = Vec::new();
    for n in 0..n_bins {
        let p = water_level - sigma_eff[n];
        if p > 0.0 {
            power[n] = p;
            active_set.push(n);
        }
    }
    Ok(WaterfillResult {
        allocation: PowerAllocation::new(power, 0),
        water_level,
        active_set,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance::GameInstance;
    use ndarray::{Array2, Array3};
    use proptest::prelude::*;

    /// Builds a small instance from explicit sigma/alpha tables.
    /// `alpha[(j, k)]` is the gain from transmitter j into receiver k.
    pub(crate) fn make_instance(
        noise: Vec<Vec<f64>>,
        alpha: Vec<((usize, usize), Vec<f64>)>,
        budget: Vec<f64>,
    ) -> GameInstance {
        let k_users = noise.len();
        let n_bins = noise[0].len();
        let mut sig = Array2::zeros((k_users, n_bins));
        for (k, row) in noise.iter().enumerate() {
            for (n, &v) in row.iter().enumerate() {
                sig[[k, n]] = v;
            }
        }
        let mut cross = Array3::zeros((k_users, k_users, n_bins));
        for ((j, k), row) in alpha {
            for (n, v) in row.into_iter().enumerate() {
                cross[[j, k, n]] = v;
            }
        }
        GameInstance::new(sig, cross, budget).unwrap()
    }

    #[test]
    fn rate_single_user_single_bin() {
        let inst = make_instance(vec![vec![1.0], vec![1.0]], vec![], vec![1.0, 1.0]);
        let allocs = vec![
            PowerAllocation::new(vec![1.0], 0),
            PowerAllocation::zeros(1, 1),
        ];
        assert!((achievable_rate(&inst, &allocs, 0) - 1.0).abs() < 1e-15); // log2(2)
    }

    #[test]
    fn rate_zero_allocation_is_zero() {
        let inst = make_instance(vec![vec![1.0, 2.0], vec![1.0, 2.0]], vec![], vec![1.0, 1.0]);
        let allocs = vec![PowerAllocation::zeros(2, 0), PowerAllocation::zeros(2, 1)];
        assert_eq!(achievable_rate(&inst, &allocs, 0), 0.0);
    }

    #[test]
    fn rate_with_interference() {
        // K=2, N=1: P1=1, P2=2, sigma1=1, alpha_21=0.5 -> log2(1 + 1/2).
        let inst = make_instance(
            vec![vec![1.0], vec![1.0]],
            vec![((1, 0), vec![0.5])],
            vec![2.0, 2.0],
        );
        let allocs = vec![
            PowerAllocation::new(vec![1.0], 0),
            PowerAllocation::new(vec![2.0], 1),
        ];
        let r = achievable_rate(&inst, &allocs, 0);
        assert!((r - 1.5f64.log2()).abs() < 1e-15);
        assert!((r - 0.5849625007211562).abs() < 1e-12);
    }

    #[test]
    fn interference_componentwise_sum() {
        let inst = make_instance(
            vec![vec![1.0, 1.0], vec![1.0, 1.0]],
            vec![((1, 0), vec![0.5, 0.5])],
            vec![2.0, 2.0],
        );
        let allocs = vec![
            PowerAllocation::zeros(2, 0),
            PowerAllocation::new(vec![2.0, 0.0], 1),
        ];
        assert_eq!(stationary_interference(&inst, &allocs, 0), vec![1.0, 0.0]);
        // Opponent silent -> zero vector.
        let silent = vec![PowerAllocation::zeros(2, 0), PowerAllocation::zeros(2, 1)];
        assert_eq!(stationary_interference(&inst, &silent, 0), vec![0.0, 0.0]);
    }

    #[test]
    fn interference_three_users() {
        let inst = make_instance(
            vec![vec![1.0, 1.0], vec![1.0, 1.0], vec![1.0, 1.0]],
            vec![
                ((1, 0), vec![0.33, 0.33]),
                ((2, 0), vec![0.33, 0.33]),
            ],
            vec![2.0, 2.0, 2.0],
        );
        let allocs = vec![
            PowerAllocation::zeros(2, 0),
            PowerAllocation::new(vec![1.0, 1.0], 1),
            PowerAllocation::new(vec![1.0, 1.0], 2),
        ];
        let i = stationary_interference(&inst, &allocs, 0);
        assert!((i[0] - 0.66).abs() < 1e-15 && (i[1] - 0.66).abs() < 1e-15);
    }

    #[test]
    fn waterfill_symmetric_split() {
        let r = waterfill_best_response(&[1.0, 1.0], 2.0).unwrap();
        assert_eq!(r.allocation.power, vec![1.0, 1.0]);
        assert_eq!(r.water_level, 2.0);
        assert_eq!(r.active_set, vec![0, 1]);
    }

    #[test]
    fn waterfill_shuts_off_expensive_bin() {
        // By hand: try both bins active -> nu = (2+4)/2 = 3, but then
        // P2 = 3-3 = 0, not strictly positive; one bin -> nu = 2+1 = 3 > 1.
        let r = waterfill_best_response(&[1.0, 3.0], 2.0).unwrap();
        assert_eq!(r.allocation.power, vec![2.0, 0.0]);
        assert_eq!(r.water_level, 3.0);
        assert_eq!(r.active_set, vec![0]);
    }

    #[test]
    fn waterfill_two_active_bins() {
        // By hand: nu = (3 + 1 + 2)/2 = 3 > 2, both active.
        let r = waterfill_best_response(&[1.0, 2.0], 3.0).unwrap();
        assert_eq!(r.allocation.power, vec![2.0, 1.0]);
        assert_eq!(r.water_level, 3.0);
    }

    #[test]
    fn waterfill_rejects_bad_inputs() {
        assert!(matches!(
            waterfill_best_response(&[1.0], 0.0),
            Err(Error::NonPositiveBudget(_))
        ));
        assert!(matches!(
            waterfill_best_response(&[1.0, 0.0], 1.0),
            Err(Error::NonPositiveNoise { bin: 1, .. })
        ));
    }

    /// KKT conditions and budget saturation on random inputs.
    fn kkt_ok(sigma: &[f64], budget: f64) -> bool {
        let r = waterfill_best_response(sigma, budget).unwrap();
        let nu = r.water_level;
        let p = &r.allocation.power;
        let active_ok = (0..sigma.len())
            .filter(|&n| p[n] > 0.0)
            .all(|n| (nu - sigma[n] - p[n]).abs() <= 1e-8);
        let inactive_ok = (0..sigma.len())
            .filter(|&n| p[n] == 0.0)
            .all(|n| sigma[n] - nu >= -1e-8);
        let saturated = (r.allocation.total() - budget).abs() <= 1e-9 * budget;
        active_ok && inactive_ok && saturated
    }

    proptest! {
        #[test]
        fn kkt_and_saturation(
            sigma in proptest::collection::vec(1e-3f64..1e3, 1..40),
            budget in 1e-3f64..1e4,
        ) {
            prop_assert!(kkt_ok(&sigma, budget));
        }

        #[test]
        fn more_budget_never_hurts(
            sigma in proptest::collection::vec(1e-3f64..1e3, 1..40),
            budget in 1e-3f64..1e3,
            extra in 0.0f64..1e3,
        ) {
            let lo = waterfill_best_response(&sigma, budget).unwrap();
            let hi = waterfill_best_response(&sigma, budget + extra).unwrap();
            let r_lo = rate_nats(&sigma, &lo.allocation.power);
            let r_hi = rate_nats(&sigma, &hi.allocation.power);
            prop_assert!(r_hi >= r_lo - 1e-12);
        }
    }
}
