//! Game data model and randomized interference-channel instances.
//!
//! A [`GameInstance`] holds everything that defines one `K`-user, `N`-bin
//! power-allocation game: normalized noise `sigma_k^n = N_k(f_n)/|H_kk(f_n)|^2`,
//! normalized cross gains `alpha_jk^n = |H_jk(f_n)|^2/|H_kk(f_n)|^2`, and the
//! per-user power budgets.
//!
//! [`generate_instance`] draws instances from a four-ray (configurable)
//! Rayleigh tapped-delay-line model with an exponential power profile,
//! evaluated at bin-center frequencies. Generation is a pure function of
//! `(params, num_users, seed)`: the RNG is ChaCha8 seeded from the 64-bit
//! seed, and draws happen in a fixed documented order, so instances reproduce
//! bit-for-bit within this implementation.

use ndarray::{Array2, Array3, ArrayView1};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Parameters of the multipath channel ensemble.
///
/// Defaults follow the two-user setup: 200 bins over a 10 MHz band, four
/// Rayleigh rays with an exponential power profile and 100 ns RMS delay
/// spread, direct-channel tap power normalized to one, flat noise PSD 0.01,
/// and a per-user budget of 200.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelModelParams {
    pub num_bins: usize,
    pub band_hz: f64,
    pub num_rays: usize,
    pub rms_delay_s: f64,
    pub direct_power: f64,
    /// Total multipath power of each cross channel `H_jk`, `j != k`.
    /// 0.5 in the two-user ensemble, 0.33 in the three-user ensemble.
    pub cross_power: f64,
    pub noise_psd: f64,
    pub budget_per_user: f64,
}

impl Default for ChannelModelParams {
    fn default() -> Self {
        Self::two_user()
    }
}

impl ChannelModelParams {
    /// Two-user ensemble: cross-channel tap power 0.5.
    pub fn two_user() -> Self {
        ChannelModelParams {
            num_bins: 200,
            band_hz: 1.0e7,
            num_rays: 4,
            rms_delay_s: 1.0e-7,
            direct_power: 1.0,
            cross_power: 0.5,
            noise_psd: 0.01,
            budget_per_user: 200.0,
        }
    }

    /// Three-user ensemble: cross-channel tap power 0.33.
    pub fn three_user() -> Self {
        ChannelModelParams {
            cross_power: 0.33,
            ..Self::two_user()
        }
    }

    /// Checks that every field is strictly positive (`cross_power` may be 0,
    /// which degenerates to decoupled channels).
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.num_bins == 0 {
            bad.push("num_bins must be positive".to_string());
        }
        if self.num_rays == 0 {
            bad.push("num_rays must be positive".to_string());
        }
        for (name, v) in [
            ("band_hz", self.band_hz),
            ("rms_delay_s", self.rms_delay_s),
            ("direct_power", self.direct_power),
            ("noise_psd", self.noise_psd),
            ("budget_per_user", self.budget_per_user),
        ] {
            if v <= 0.0 || !v.is_finite() {
                bad.push(format!("{name} must be strictly positive, got {v}"));
            }
        }
        if self.cross_power < 0.0 || !self.cross_power.is_finite() {
            bad.push(format!(
                "cross_power must be non-negative, got {}",
                self.cross_power
            ));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidInstance(bad.join("; ")))
        }
    }
}

/// Provenance of a generated instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct InstanceMeta {
    /// Seed passed to [`generate_instance`], if the instance was generated.
    pub seed: Option<u64>,
    /// Number of whole-instance redraws triggered by a near-zero direct gain.
    pub redraws: u32,
}

/// One `K`-user, `N`-bin game: channels, noise, and budgets.
///
/// `cross_gain[[j, k, n]]` is the normalized gain from transmitter `j` into
/// receiver `k` in bin `n`; diagonal entries (`j == k`) are fixed to zero.
/// The instance is immutable in practice once built and safe to share across
/// threads.
#[derive(Debug, Clone, PartialEq)]
pub struct GameInstance {
    pub num_users: usize,
    pub num_bins: usize,
    /// `noise[[k, n]]` = equivalent noise PSD of user `k` in bin `n` (> 0).
    pub noise: Array2<f64>,
    /// `cross_gain[[j, k, n]]` = alpha_jk in bin `n` (>= 0, zero diagonal).
    pub cross_gain: Array3<f64>,
    /// Per-user total-power budgets (> 0).
    pub budget: Vec<f64>,
    pub meta: InstanceMeta,
}

impl GameInstance {
    /// Builds an instance, rejecting any invariant violation.
    pub fn new(noise: Array2<f64>, cross_gain: Array3<f64>, budget: Vec<f64>) -> Result<Self> {
        let inst = GameInstance {
            num_users: budget.len(),
            num_bins: noise.ncols(),
            noise,
            cross_gain,
            budget,
            meta: InstanceMeta::default(),
        };
        let violations = validate_instance(&inst);
        if violations.is_empty() {
            Ok(inst)
        } else {
            Err(Error::InvalidInstance(violations.join("; ")))
        }
    }

    pub fn noise_row(&self, user: usize) -> ArrayView1<'_, f64> {
        self.noise.row(user)
    }

    pub fn budget(&self, user: usize) -> f64 {
        self.budget[user]
    }

    /// Normalized gain from transmitter `j` into receiver `k` in bin `n`.
    pub fn gain(&self, j: usize, k: usize, n: usize) -> f64 {
        self.cross_gain[[j, k, n]]
    }
}

/// Checks every [`GameInstance`] invariant and returns one description per
/// violation; an empty list means the instance is valid.
pub fn validate_instance(inst: &GameInstance) -> Vec<String> {
    let mut v = Vec::new();
    let (k_users, n_bins) = (inst.num_users, inst.num_bins);
    if k_users == 0 {
        v.push("num_users must be positive".to_string());
    }
    if n_bins == 0 {
        v.push("num_bins must be positive".to_string());
    }
    if inst.noise.dim() != (k_users, n_bins) {
        v.push(format!(
            "noise has shape {:?}, expected ({k_users}, {n_bins})",
            inst.noise.dim()
        ));
        return v; // shape mismatch makes element checks meaningless
    }
    if inst.cross_gain.dim() != (k_users, k_users, n_bins) {
        v.push(format!(
            "cross_gain has shape {:?}, expected ({k_users}, {k_users}, {n_bins})",
            inst.cross_gain.dim()
        ));
        return v;
    }
    if inst.budget.len() != k_users {
        v.push(format!(
            "budget has {} entries, expected {k_users}",
            inst.budget.len()
        ));
        return v;
    }
    for k in 0..k_users {
        for n in 0..n_bins {
            let s = inst.noise[[k, n]];
            if s <= 0.0 || !s.is_finite() {
                v.push(format!("noise must be positive: user {k}, bin {n} has {s}"));
            }
        }
    }
    for j in 0..k_users {
        for k in 0..k_users {
            for n in 0..n_bins {
                let a = inst.cross_gain[[j, k, n]];
                if j == k && a != 0.0 {
                    v.push(format!(
                        "diagonal cross_gain must be zero: user {k}, bin {n} has {a}"
                    ));
                } else if a < 0.0 || !a.is_finite() {
                    v.push(format!(
                        "cross_gain must be non-negative and finite: ({j}, {k}), bin {n} has {a}"
                    ));
                }
            }
        }
    }
    for (k, b) in inst.budget.iter().enumerate() {
        if *b <= 0.0 || !b.is_finite() {
            v.push(format!("budget must be positive: user {k} has {b}"));
        }
    }
    v
}

/// Direct gains below this trigger a whole-instance redraw: normalized noise
/// would otherwise blow up to ~1e14.
const MIN_DIRECT_GAIN: f64 = 1e-12;

/// Seed stride between redraw attempts. A golden-ratio stride keeps redrawn
/// streams disjoint from the `base_seed + trial` seeds used by ensembles.
const REDRAW_STRIDE: u64 = 0x9E37_79B9_7F4A_7C15;

const MAX_REDRAWS: u32 = 64;

/// Draws one instance from the multipath ensemble.
///
/// Per ordered transmitter-receiver pair `(j, k)`, `num_rays` independent
/// circularly-symmetric complex Gaussian taps are drawn with variances
/// following the exponential profile, then rescaled so the *realized* total
/// tap power is exactly `direct_power` for `j == k` and `cross_power`
/// otherwise (each draw's rays carry the nominal channel power; only the
/// frequency profile is random). Tap `l` sits at delay `l * delta`; `delta`
/// is chosen (with the decay constant equal to `delta`) so the
/// power-weighted RMS delay spread equals `rms_delay_s`. The transfer
/// functions are evaluated at the bin centers
/// `f_n = (n - 1/2) * band_hz / num_bins`.
///
/// Draw order is fixed: pairs `(j, k)` in row-major order, two standard
/// normals (re, im) per tap. If any direct gain `|H_kk(f_n)|^2` falls below
/// 1e-12 the whole instance is redrawn from `seed + redraws * stride`
/// (recorded in [`InstanceMeta`]).
pub fn generate_instance(
    params: &ChannelModelParams,
    num_users: usize,
    seed: u64,
) -> Result<GameInstance> {
    params.validate()?;
    if num_users < 2 {
        return Err(Error::InvalidInstance(format!(
            "num_users must be at least 2, got {num_users}"
        )));
    }

    let n_bins = params.num_bins;
    let rays = params.num_rays;

    // Exponential power profile over tap indices l = 0..rays: weights
    // p_l ∝ exp(-l), normalized. With decay constant tau0 equal to the tap
    // spacing delta, the power-weighted RMS delay spread is
    // delta * std(l under p), which pins delta.
    let mut weights: Vec<f64> = (0..rays).map(|l| (-(l as f64)).exp()).collect();
    let wsum: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= wsum;
    }
    let mean_l: f64 = weights.iter().enumerate().map(|(l, w)| l as f64 * w).sum();
    let var_l: f64 = weights
        .iter()
        .enumerate()
        .map(|(l, w)| (l as f64 - mean_l).powi(2) * w)
        .sum();
    let delta = if var_l > 0.0 {
        params.rms_delay_s / var_l.sqrt()
    } else {
        0.0 // single ray: flat channel, no delay spread to match
    };
    let delays: Vec<f64> = (0..rays).map(|l| l as f64 * delta).collect();

    for attempt in 0..MAX_REDRAWS {
        let attempt_seed = seed.wrapping_add(REDRAW_STRIDE.wrapping_mul(attempt as u64));
        let mut rng = ChaCha8Rng::seed_from_u64(attempt_seed);

        // gains[[j, k, n]] = |H_jk(f_n)|^2
        let mut gains = Array3::<f64>::zeros((num_users, num_users, n_bins));
        for j in 0..num_users {
            for k in 0..num_users {
                let total = if j == k {
                    params.direct_power
                } else {
                    params.cross_power
                };
                let mut taps: Vec<Complex64> = weights
                    .iter()
                    .map(|w| {
                        let scale = (total * w / 2.0).sqrt();
                        let re: f64 = rng.sample(StandardNormal);
                        let im: f64 = rng.sample(StandardNormal);
                        Complex64::new(re * scale, im * scale)
                    })
                    .collect();
                let realized: f64 = taps.iter().map(|t| t.norm_sqr()).sum();
                if total > 0.0 && realized > 0.0 {
                    let fix = (total / realized).sqrt();
                    for t in &mut taps {
                        *t *= fix;
                    }
                }
                for n in 0..n_bins {
                    let f = (n as f64 + 0.5) * params.band_hz / n_bins as f64;
                    let mut h = Complex64::new(0.0, 0.0);
                    for (tap, tau) in taps.iter().zip(&delays) {
                        let phase = -2.0 * std::f64::consts::PI * f * tau;
                        h += tap * Complex64::new(phase.cos(), phase.sin());
                    }
                    gains[[j, k, n]] = h.norm_sqr();
                }
            }
        }

        let degenerate = (0..num_users)
            .any(|k| (0..n_bins).any(|n| gains[[k, k, n]] < MIN_DIRECT_GAIN));
        if degenerate {
            continue;
        }

        let mut noise = Array2::<f64>::zeros((num_users, n_bins));
        let mut cross = Array3::<f64>::zeros((num_users, num_users, n_bins));
        for k in 0..num_users {
            for n in 0..n_bins {
                let direct = gains[[k, k, n]];
                noise[[k, n]] = params.noise_psd / direct;
                for j in 0..num_users {
                    if j != k {
                        cross[[j, k, n]] = gains[[j, k, n]] / direct;
                    }
                }
            }
        }

        let mut inst = GameInstance::new(
            noise,
            cross,
            vec![params.budget_per_user; num_users],
        )?;
        inst.meta = InstanceMeta {
            seed: Some(seed),
            redraws: attempt,
        };
        return Ok(inst);
    }

    Err(Error::InvalidInstance(format!(
        "exceeded {MAX_REDRAWS} redraws for seed {seed}; direct channel keeps degenerating"
    )))
}

// ---------------------------------------------------------------------------
// Flat text format: `K N` header, K sigma rows, K*K alpha rows in (j, k)
// row-major order (diagonal rows are all zeros), one budget row. Values are
// printed with 17 significant digits, which round-trips f64 exactly and
// comfortably exceeds the required 15.
// ---------------------------------------------------------------------------

/// Serializes an instance to the flat text format.
pub fn instance_to_text(inst: &GameInstance) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{} {}", inst.num_users, inst.num_bins);
    let fmt_row = |row: &mut String, values: &mut dyn Iterator<Item = f64>| {
        let mut first = true;
        for v in values {
            if !first {
                row.push(' ');
            }
            let _ = write!(row, "{v:.16e}");
            first = false;
        }
        row.push('\n');
    };
    for k in 0..inst.num_users {
        fmt_row(&mut out, &mut inst.noise.row(k).iter().copied());
    }
    for j in 0..inst.num_users {
        for k in 0..inst.num_users {
            let mut it = (0..inst.num_bins).map(|n| inst.cross_gain[[j, k, n]]);
            fmt_row(&mut out, &mut it);
        }
    }
    fmt_row(&mut out, &mut inst.budget.iter().copied());
    out
}

/// Parses the flat text format produced by [`instance_to_text`].
pub fn instance_from_text(text: &str, origin: &Path) -> Result<GameInstance> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::parse(origin, "empty file"))?;
    let mut hdr = header.split_whitespace();
    let parse_dim = |tok: Option<&str>, name: &str| -> Result<usize> {
        tok.ok_or_else(|| Error::parse(origin, format!("missing {name} in header")))?
            .parse::<usize>()
            .map_err(|e| Error::parse(origin, format!("bad {name}: {e}")))
    };
    let k_users = parse_dim(hdr.next(), "K")?;
    let n_bins = parse_dim(hdr.next(), "N")?;

    let mut parse_row = |what: String| -> Result<Vec<f64>> {
        let line = lines
            .next()
            .ok_or_else(|| Error::parse(origin, format!("missing row: {what}")))?;
        let vals: std::result::Result<Vec<f64>, _> =
            line.split_whitespace().map(str::parse::<f64>).collect();
        let vals = vals.map_err(|e| Error::parse(origin, format!("bad number in {what}: {e}")))?;
        if vals.len() != n_bins && what != "budgets" {
            return Err(Error::parse(
                origin,
                format!("{what} has {} values, expected {n_bins}", vals.len()),
            ));
        }
        Ok(vals)
    };

    let mut noise = Array2::<f64>::zeros((k_users, n_bins));
    for k in 0..k_users {
        let row = parse_row(format!("sigma row for user {k}"))?;
        for (n, v) in row.into_iter().enumerate() {
            noise[[k, n]] = v;
        }
    }
    let mut cross = Array3::<f64>::zeros((k_users, k_users, n_bins));
    for j in 0..k_users {
        for k in 0..k_users {
            let row = parse_row(format!("alpha row ({j}, {k})"))?;
            for (n, v) in row.into_iter().enumerate() {
                cross[[j, k, n]] = v;
            }
        }
    }
    let budget = parse_row("budgets".to_string())?;
    if budget.len() != k_users {
        return Err(Error::parse(
            origin,
            format!("budget row has {} values, expected {k_users}", budget.len()),
        ));
    }
    GameInstance::new(noise, cross, budget)
}

/// Writes an instance file.
pub fn write_instance(inst: &GameInstance, path: &Path) -> Result<()> {
    std::fs::write(path, instance_to_text(inst)).map_err(|e| Error::io(path, e))
}

/// Reads an instance file.
pub fn read_instance(path: &Path) -> Result<GameInstance> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    instance_from_text(&text, path)
}
