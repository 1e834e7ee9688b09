//! Seeded Monte Carlo experiments over channel ensembles.
//!
//! A *trial* draws one instance from the channel model, screens it
//! (uniqueness condition, iterative water-filling convergence), and measures
//! the equilibrium rates, the CRM rates, and — on desk-scale instances — the
//! grid-search Stackelberg rates. Trials are pure functions of
//! `(params, opts, seed)`, so ensembles parallelize freely and reproduce
//! exactly; results are ordered by seed regardless of execution order.
//!
//! All output flows through CSV: one row per trial, one row per summary
//! metric, plus `(value, cumulative probability)` pairs for each empirical
//! CDF of the rate ratios `R_i / R_i^{ne}` (and `R_i / R_i^{se}` when the
//! Stackelberg oracle ran). Ratios and rates carry 9 significant digits.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use crate::crm::{crm, grid_search_se, CrmOptions, StopReason};
use crate::equilibrium::{check_uniqueness_condition, iterate_waterfilling, IwOptions};
use crate::error::{Error, Result};
use crate::instance::{generate_instance, ChannelModelParams};
use crate::waterfill::achievable_rate;

/// Allocation distance below which a CRM outcome counts as identical to the
/// iterative water-filling one.
pub const IDENTICAL_TOL: f64 = 1e-6;

/// SE oracle resolution used automatically on desk-scale trials.
fn se_resolution(num_bins: usize) -> usize {
    if num_bins <= 2 {
        400
    } else {
        120
    }
}

/// Why a trial was excluded from the ensemble statistics.
///
/// Existence of the equilibrium is screened operationally — did iterative
/// water-filling converge — rather than by the `||G||_inf < 1` sufficient
/// condition: Rayleigh-drawn normalized gains exceed 1 in *some* bin with
/// overwhelming probability at realistic `N` (the flag would reject
/// essentially every draw), while IW itself converges on almost all of them.
/// The flag is still computed and recorded per trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectReason {
    /// Full-game iterative water-filling did not converge.
    NeDiverged,
    /// A solver failed mid-trial (pathological instance).
    SolverError,
}

impl RejectReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            RejectReason::NeDiverged => "ne_diverged",
            RejectReason::SolverError => "solver_error",
        }
    }
}

/// Outcome of one Monte Carlo trial.
#[derive(Debug, Clone)]
pub struct TrialReport {
    pub seed: u64,
    pub uniqueness_flag: bool,
    pub uniqueness_norm: f64,
    pub rejection: Option<RejectReason>,
    /// Per-user equilibrium rates in bits (empty when rejected).
    pub ne_rates_bits: Vec<f64>,
    /// Per-user rates after CRM, in bits (empty when rejected).
    pub crm_rates_bits: Vec<f64>,
    /// Per-user Stackelberg-grid rates when the instance is desk-scale.
    pub se_rates_bits: Option<Vec<f64>>,
    /// Outer CRM iterations (>= 1 for accepted trials).
    pub iterations: usize,
    pub stop_reason: Option<StopReason>,
    pub converged_to_ce: bool,
    pub warnings: u32,
    /// CRM returned the water-filling allocation (max-norm <= 1e-6).
    pub identical_to_iw: bool,
}

impl TrialReport {
    pub fn accepted(&self) -> bool {
        self.rejection.is_none()
    }

    fn rejected(seed: u64, flag: bool, norm: f64, reason: RejectReason) -> Self {
        TrialReport {
            seed,
            uniqueness_flag: flag,
            uniqueness_norm: norm,
            rejection: Some(reason),
            ne_rates_bits: Vec::new(),
            crm_rates_bits: Vec::new(),
            se_rates_bits: None,
            iterations: 0,
            stop_reason: None,
            converged_to_ce: false,
            warnings: 0,
            identical_to_iw: false,
        }
    }
}

/// Runs one seeded trial: generate, screen, equilibrate, run CRM, and (for
/// `N <= 4`, `K <= 3`) the Stackelberg grid. Deterministic per
/// `(params, num_users, opts, seed)`. Rejections are data, not errors.
pub fn run_trial(
    params: &ChannelModelParams,
    num_users: usize,
    opts: &CrmOptions,
    seed: u64,
) -> Result<TrialReport> {
    let inst = generate_instance(params, num_users, seed)?;
    let (unique, norm) = check_uniqueness_condition(&inst);

    let iw = IwOptions::default();
    let ne = iterate_waterfilling(&inst, None, None, &iw)?;
    if !ne.converged {
        return Ok(TrialReport::rejected(
            seed,
            unique,
            norm,
            RejectReason::NeDiverged,
        ));
    }
    let ne_rates: Vec<f64> = (0..num_users)
        .map(|k| achievable_rate(&inst, &ne.allocations, k))
        .collect();

    let trace = match crm(&inst, opts) {
        Ok(trace) => trace,
        Err(_) => {
            return Ok(TrialReport::rejected(
                seed,
                unique,
                norm,
                RejectReason::SolverError,
            ))
        }
    };

    let se_rates = if inst.num_bins <= 4 && inst.num_users <= 3 {
        grid_search_se(&inst, se_resolution(inst.num_bins))
            .ok()
            .map(|se| se.rates_bits)
    } else {
        None
    };

    let identical =
        trace.final_allocation.max_norm_distance(&trace.ne_allocation) <= IDENTICAL_TOL;

    Ok(TrialReport {
        seed,
        uniqueness_flag: unique,
        uniqueness_norm: norm,
        rejection: None,
        ne_rates_bits: ne_rates,
        crm_rates_bits: trace.final_rates_bits.clone(),
        se_rates_bits: se_rates,
        iterations: trace.num_iterations(),
        stop_reason: Some(trace.stop_reason),
        converged_to_ce: trace.converged_to_ce,
        warnings: trace.warnings,
        identical_to_iw: identical,
    })
}

/// Aggregates over the accepted trials of an ensemble.
#[derive(Debug, Clone)]
pub struct EnsembleStats {
    pub trials: usize,
    pub accepted: usize,
    pub rejected: usize,
    /// Per-user mean of `R_i / R_i^{ne} - 1`.
    pub mean_improvement: Vec<f64>,
    /// Fraction of accepted trials whose CRM allocation equals the
    /// water-filling one.
    pub frac_identical_to_iw: f64,
    /// Per-user fraction of accepted trials with `R_i < R_i^{ne}`.
    pub frac_ratio_below_one: Vec<f64>,
    /// Per-user sorted samples of `R_i / R_i^{ne}`.
    pub ratio_ne_cdf: Vec<Vec<f64>>,
    /// Per-user sorted samples of `R_i / R_i^{se}` when every accepted trial
    /// carried an SE measurement.
    pub ratio_se_cdf: Option<Vec<Vec<f64>>>,
    /// `(iterations, count)` over accepted trials, ascending.
    pub iteration_histogram: Vec<(usize, usize)>,
    pub mean_iterations: f64,
    pub total_warnings: u64,
}

/// Runs `trials` seeded trials (`base_seed..base_seed + trials`) across the
/// available parallelism and aggregates the accepted ones. Reports come back
/// ordered by seed regardless of scheduling.
pub fn run_ensemble(
    params: &ChannelModelParams,
    num_users: usize,
    opts: &CrmOptions,
    base_seed: u64,
    trials: usize,
) -> Result<(EnsembleStats, Vec<TrialReport>)> {
    params.validate()?;
    opts.validate()?;
    if trials == 0 {
        return Err(Error::InvalidOptions("trials must be >= 1".into()));
    }
    let reports: Vec<TrialReport> = (0..trials)
        .into_par_iter()
        .map(|i| run_trial(params, num_users, opts, base_seed + i as u64))
        .collect::<Result<_>>()?;
    let stats = aggregate(num_users, &reports);
    Ok((stats, reports))
}

fn aggregate(num_users: usize, reports: &[TrialReport]) -> EnsembleStats {
    let accepted: Vec<&TrialReport> = reports.iter().filter(|r| r.accepted()).collect();
    let n_acc = accepted.len();

    let mut mean_improvement = vec![0.0; num_users];
    let mut frac_below = vec![0.0; num_users];
    let mut ratio_ne: Vec<Vec<f64>> = vec![Vec::with_capacity(n_acc); num_users];
    let mut ratio_se: Vec<Vec<f64>> = vec![Vec::with_capacity(n_acc); num_users];
    let mut identical = 0usize;
    let mut iter_counts: std::collections::BTreeMap<usize, usize> = Default::default();
    let mut iter_sum = 0usize;
    let mut warnings = 0u64;
    let mut se_everywhere = n_acc > 0;

    for r in &accepted {
        for k in 0..num_users {
            let ratio = r.crm_rates_bits[k] / r.ne_rates_bits[k];
            ratio_ne[k].push(ratio);
            mean_improvement[k] += ratio - 1.0;
            if ratio < 1.0 {
                frac_below[k] += 1.0;
            }
        }
        match &r.se_rates_bits {
            Some(se) => {
                for k in 0..num_users {
                    ratio_se[k].push(r.crm_rates_bits[k] / se[k]);
                }
            }
            None => se_everywhere = false,
        }
        if r.identical_to_iw {
            identical += 1;
        }
        *iter_counts.entry(r.iterations).or_insert(0) += 1;
        iter_sum += r.iterations;
        warnings += r.warnings as u64;
    }

    if n_acc > 0 {
        for k in 0..num_users {
            mean_improvement[k] /= n_acc as f64;
            frac_below[k] /= n_acc as f64;
            ratio_ne[k].sort_unstable_by(f64::total_cmp);
            ratio_se[k].sort_unstable_by(f64::total_cmp);
        }
    }

    EnsembleStats {
        trials: reports.len(),
        accepted: n_acc,
        rejected: reports.len() - n_acc,
        mean_improvement,
        frac_identical_to_iw: if n_acc > 0 {
            identical as f64 / n_acc as f64
        } else {
            0.0
        },
        frac_ratio_below_one: frac_below,
        ratio_ne_cdf: ratio_ne,
        ratio_se_cdf: if se_everywhere { Some(ratio_se) } else { None },
        iteration_histogram: iter_counts.into_iter().collect(),
        mean_iterations: if n_acc > 0 {
            iter_sum as f64 / n_acc as f64
        } else {
            0.0
        },
        total_warnings: warnings,
    }
}

/// 9-significant-digit formatting used for all rates and ratios in CSV.
fn sig9(x: f64) -> String {
    format!("{x:.8e}")
}

/// Writes the per-trial CSV. Rate columns of rejected trials are empty, as
/// are SE columns when the oracle did not run.
pub fn emit_trials_csv(reports: &[TrialReport], num_users: usize, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str("seed,accepted,iters,stop_reason,ce");
    for k in 0..num_users {
        let u = k + 1;
        let _ = write!(out, ",R{u}_ne,R{u}_crm,R{u}_se");
    }
    out.push('\n');
    for r in reports {
        let _ = write!(
            out,
            "{},{},{},{},{}",
            r.seed,
            r.accepted(),
            r.iterations,
            r.stop_reason.map(|s| s.as_str()).unwrap_or(""),
            r.converged_to_ce
        );
        for k in 0..num_users {
            let ne = r.ne_rates_bits.get(k).map(|&x| sig9(x)).unwrap_or_default();
            let cr = r.crm_rates_bits.get(k).map(|&x| sig9(x)).unwrap_or_default();
            let se = r
                .se_rates_bits
                .as_ref()
                .and_then(|v| v.get(k))
                .map(|&x| sig9(x))
                .unwrap_or_default();
            let _ = write!(out, ",{ne},{cr},{se}");
        }
        out.push('\n');
    }
    write_file(path, &out)
}

/// Writes the summary CSV: one `metric,value` row per statistic.
pub fn emit_stats_csv(stats: &EnsembleStats, path: &Path) -> Result<()> {
    let mut out = String::from("metric,value\n");
    let mut row = |name: &str, value: String| {
        let _ = writeln!(out, "{name},{value}");
    };
    row("trials", stats.trials.to_string());
    row("accepted", stats.accepted.to_string());
    row("rejected", stats.rejected.to_string());
    row("frac_identical_to_iw", sig9(stats.frac_identical_to_iw));
    row("mean_iterations", sig9(stats.mean_iterations));
    row("total_warnings", stats.total_warnings.to_string());
    for (k, v) in stats.mean_improvement.iter().enumerate() {
        row(&format!("mean_improvement_user{}", k + 1), sig9(*v));
    }
    for (k, v) in stats.frac_ratio_below_one.iter().enumerate() {
        row(&format!("frac_ratio_below_one_user{}", k + 1), sig9(*v));
    }
    for (iters, count) in &stats.iteration_histogram {
        row(&format!("iterations_{iters}"), count.to_string());
    }
    write_file(path, &out)
}

/// Writes one empirical CDF as `value,cumulative_probability` rows over the
/// (sorted) samples.
pub fn emit_cdf_csv(sorted_samples: &[f64], path: &Path) -> Result<()> {
    let mut out = String::from("ratio,cumulative_probability\n");
    let n = sorted_samples.len();
    for (i, v) in sorted_samples.iter().enumerate() {
        let _ = writeln!(out, "{},{}", sig9(*v), sig9((i + 1) as f64 / n as f64));
    }
    write_file(path, &out)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(contents.as_bytes()).map_err(|e| Error::io(path, e))
}

/// On-disk configuration mirroring [`ChannelModelParams`] and [`CrmOptions`].
///
/// ```toml
/// [channel]
/// num_bins = 200
/// cross_power = 0.5
///
/// [crm]
/// trust_radius = 1.0
/// line_search_points = 101
/// ```
///
/// Command-line flags override config values, which override the defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub channel: ChannelModelParams,
    pub crm: CrmOptions,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
    }
}
