//! Shared samplers and independent oracles for the integration suites.
//!
//! Everything here deliberately avoids the library's solver paths: grid
//! searches enumerate, samplers build instances directly, so the tests check
//! the implementation against genuinely independent references.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use waterfill_games::{GameInstance, PowerAllocation};

/// Random instance with cross gains bounded so the `||G||_inf < 1` screen
/// passes by construction. Rayleigh-drawn gains essentially never pass it at
/// realistic sizes, so flag-gated suites sample from here instead.
pub fn random_contraction_instance(
    k_users: usize,
    n_bins: usize,
    seed: u64,
    alpha_cap: f64,
    budget_range: (f64, f64),
) -> GameInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Array2::from_shape_fn((k_users, n_bins), |_| rng.gen_range(0.05..1.0));
    let mut cross = Array3::zeros((k_users, k_users, n_bins));
    for j in 0..k_users {
        for k in 0..k_users {
            if j != k {
                for n in 0..n_bins {
                    cross[[j, k, n]] = rng.gen_range(0.0..alpha_cap);
                }
            }
        }
    }
    let budget: Vec<f64> = (0..k_users)
        .map(|_| rng.gen_range(budget_range.0..budget_range.1))
        .collect();
    GameInstance::new(noise, cross, budget).unwrap()
}

/// Best single-user rate (nats) over the simplex grid `sum P = budget`,
/// `P in budget * {0, 1/resolution, .., 1}`, for `N <= 3`. The budget binds
/// at the optimum because the objective strictly increases per bin.
pub fn grid_waterfill_rate_nats(sigma: &[f64], budget: f64, resolution: usize) -> f64 {
    let rate = |p: &[f64]| -> f64 {
        p.iter()
            .zip(sigma)
            .map(|(&p, &s)| (1.0 + p / s).ln())
            .sum()
    };
    let step = budget / resolution as f64;
    match sigma.len() {
        1 => rate(&[budget]),
        2 => {
            let mut best = f64::NEG_INFINITY;
            for i in 0..=resolution {
                let p0 = i as f64 * step;
                best = best.max(rate(&[p0, budget - p0]));
            }
            best
        }
        3 => {
            let mut best = f64::NEG_INFINITY;
            for i in 0..=resolution {
                let p0 = i as f64 * step;
                for j in 0..=(resolution - i) {
                    let p1 = j as f64 * step;
                    best = best.max(rate(&[p0, p1, budget - p0 - p1]));
                }
            }
            best
        }
        n => panic!("grid oracle supports N <= 3, got {n}"),
    }
}

pub fn rate_nats(sigma: &[f64], power: &[f64]) -> f64 {
    power
        .iter()
        .zip(sigma)
        .map(|(&p, &s)| (1.0 + p / s).ln())
        .sum()
}

pub fn max_norm(a: &PowerAllocation, b: &PowerAllocation) -> f64 {
    a.power
        .iter()
        .zip(&b.power)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
