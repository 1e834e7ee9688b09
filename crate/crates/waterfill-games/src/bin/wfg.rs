//! Command-line front end: generate instances, solve equilibria, run CRM,
//! the Stackelberg grid oracle, and Monte Carlo ensembles.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use waterfill_games::harness::{emit_cdf_csv, emit_stats_csv, emit_trials_csv, RunConfig};
use waterfill_games::{
    achievable_rate, crm, generate_instance, grid_search_se, iterate_waterfilling, read_instance,
    run_ensemble, write_instance, ChannelModelParams, CrmOptions, FdMode, GameInstance, IwOptions,
};

#[derive(Parser)]
#[command(
    name = "wfg",
    version,
    about = "Power-allocation games on interference channels"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a channel instance and write it to a file.
    Gen(GenArgs),
    /// Solve the Nash equilibrium by iterative water-filling.
    SolveNe(SolveNeArgs),
    /// Run conjecture-based rate maximization for user 1.
    Crm(CrmArgs),
    /// Exhaustive Stackelberg search (N <= 4, K <= 3).
    SeGrid(SeGridArgs),
    /// Run a seeded Monte Carlo ensemble and write CSV reports.
    Ensemble(EnsembleArgs),
}

/// Channel-model overrides shared by all subcommands.
/// Precedence: flags > config file > defaults.
#[derive(Args, Clone)]
struct ChannelFlags {
    /// TOML config file (`[channel]` and `[crm]` tables).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of users (2 or more; defaults pick the matching cross power).
    #[arg(long, default_value_t = 2)]
    users: usize,
    /// Number of frequency bins.
    #[arg(long)]
    bins: Option<usize>,
    /// Total multipath power of the cross channels.
    #[arg(long)]
    cross_power: Option<f64>,
    /// Per-user power budget.
    #[arg(long)]
    budget: Option<f64>,
    /// Flat noise PSD before direct-gain normalization.
    #[arg(long)]
    noise_psd: Option<f64>,
}

impl ChannelFlags {
    fn load_config(&self) -> Result<Option<RunConfig>> {
        match &self.config {
            Some(path) => Ok(Some(
                RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
            )),
            None => Ok(None),
        }
    }

    fn params(&self, config: &Option<RunConfig>) -> ChannelModelParams {
        let mut p = match config {
            Some(cfg) => cfg.channel.clone(),
            None if self.users >= 3 => ChannelModelParams::three_user(),
            None => ChannelModelParams::two_user(),
        };
        if let Some(b) = self.bins {
            p.num_bins = b;
        }
        if let Some(c) = self.cross_power {
            p.cross_power = c;
        }
        if let Some(b) = self.budget {
            p.budget_per_user = b;
        }
        if let Some(n) = self.noise_psd {
            p.noise_psd = n;
        }
        p
    }
}

/// CRM overrides shared by `crm` and `ensemble`.
#[derive(Args, Clone)]
struct CrmFlags {
    /// Per-bin cap on the candidate step (the modified CRM uses 1).
    #[arg(long)]
    trust_radius: Option<f64>,
    #[arg(long)]
    line_search_points: Option<usize>,
    /// Stop when an iteration gains fewer bits than this.
    #[arg(long)]
    improvement_tol: Option<f64>,
    #[arg(long)]
    max_outer_iter: Option<usize>,
    #[arg(long)]
    eta_bisect_tol: Option<f64>,
    /// Finite-difference scheduling for belief updates.
    #[arg(long, value_enum)]
    fd_mode: Option<FdModeArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FdModeArg {
    Batch,
    PerBin,
}

impl CrmFlags {
    fn options(&self, config: &Option<RunConfig>) -> CrmOptions {
        let mut o = config
            .as_ref()
            .map(|c| c.crm.clone())
            .unwrap_or_default();
        if let Some(r) = self.trust_radius {
            o.trust_radius = Some(r);
        }
        if let Some(p) = self.line_search_points {
            o.line_search_points = p;
        }
        if let Some(t) = self.improvement_tol {
            o.improvement_tol = t;
        }
        if let Some(m) = self.max_outer_iter {
            o.max_outer_iter = m;
        }
        if let Some(t) = self.eta_bisect_tol {
            o.eta_bisect_tol = t;
        }
        if let Some(f) = self.fd_mode {
            o.fd_mode = match f {
                FdModeArg::Batch => FdMode::Batch,
                FdModeArg::PerBin => FdMode::PerBin,
            };
        }
        o
    }
}

/// Instance source: a file, or a fresh draw from the channel model.
#[derive(Args, Clone)]
struct InstanceSource {
    /// Instance file written by `wfg gen` (channel flags are ignored).
    #[arg(long)]
    instance: Option<PathBuf>,
    /// Seed for an on-the-fly instance.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    channel: ChannelFlags,
}

impl InstanceSource {
    fn load(&self) -> Result<(GameInstance, Option<RunConfig>)> {
        let config = self.channel.load_config()?;
        let inst = match &self.instance {
            Some(path) => {
                read_instance(path).with_context(|| format!("reading {}", path.display()))?
            }
            None => generate_instance(&self.channel.params(&config), self.channel.users, self.seed)?,
        };
        Ok((inst, config))
    }
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    channel: ChannelFlags,
    /// Output instance file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SolveNeArgs {
    #[command(flatten)]
    source: InstanceSource,
    /// Sweep-change convergence tolerance.
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long, default_value_t = 10_000)]
    max_iter: usize,
    /// Write per-bin allocations to this CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CrmArgs {
    #[command(flatten)]
    source: InstanceSource,
    #[command(flatten)]
    crm: CrmFlags,
    /// Write the per-iteration trace to this CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SeGridArgs {
    #[command(flatten)]
    source: InstanceSource,
    /// Simplex grid resolution (points per budget).
    #[arg(long, default_value_t = 400)]
    resolution: usize,
    /// Write the leader allocation to this CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EnsembleArgs {
    #[command(flatten)]
    channel: ChannelFlags,
    #[command(flatten)]
    crm: CrmFlags,
    /// First seed; trials use base_seed..base_seed+trials.
    #[arg(long, default_value_t = 0)]
    base_seed: u64,
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    /// Directory for trials.csv, stats.csv, and the CDF files.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Gen(args) => cmd_gen(args),
        Command::SolveNe(args) => cmd_solve_ne(args),
        Command::Crm(args) => cmd_crm(args),
        Command::SeGrid(args) => cmd_se_grid(args),
        Command::Ensemble(args) => cmd_ensemble(args),
    }
}

fn cmd_gen(args: GenArgs) -> Result<()> {
    let config = args.channel.load_config()?;
    let params = args.channel.params(&config);
    let inst = generate_instance(&params, args.channel.users, args.seed)?;
    write_instance(&inst, &args.out)?;
    println!(
        "wrote {} ({} users, {} bins, seed {}, redraws {})",
        args.out.display(),
        inst.num_users,
        inst.num_bins,
        args.seed,
        inst.meta.redraws
    );
    Ok(())
}

fn cmd_solve_ne(args: SolveNeArgs) -> Result<()> {
    let (inst, _) = args.source.load()?;
    let opts = IwOptions {
        tol: args.tol,
        max_iter: args.max_iter,
        ..IwOptions::default()
    };
    let out = iterate_waterfilling(&inst, None, None, &opts)?;
    println!(
        "converged: {} after {} sweeps (residual {:.3e})",
        out.converged, out.iterations, out.residual
    );
    for k in 0..inst.num_users {
        let rate = achievable_rate(&inst, &out.allocations, k);
        let level = out.water_levels[k]
            .map(|v| format!("{v:.6}"))
            .unwrap_or_else(|| "-".into());
        println!("user {}: rate {:.6} bits, water level {}", k + 1, rate, level);
    }
    if let Some(path) = &args.out {
        write_allocation_csv(&out.allocations, path)?;
        println!("wrote {}", path.display());
    }
    if !out.converged {
        bail!("iterative water-filling did not converge");
    }
    Ok(())
}

fn cmd_crm(args: CrmArgs) -> Result<()> {
    let (inst, config) = args.source.load()?;
    let opts = args.crm.options(&config);
    let trace = crm(&inst, &opts)?;
    println!(
        "stopped after {} iterations: {} (conjectural equilibrium: {})",
        trace.num_iterations(),
        trace.stop_reason.as_str(),
        trace.converged_to_ce
    );
    for k in 0..inst.num_users {
        let ne = trace.ne_rates_bits[k];
        let cr = trace.final_rates_bits[k];
        println!(
            "user {}: NE {:.6} bits -> CRM {:.6} bits ({:+.2}%)",
            k + 1,
            ne,
            cr,
            100.0 * (cr / ne - 1.0)
        );
    }
    if let Some(path) = &args.out {
        write_trace_csv(&trace, path)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_se_grid(args: SeGridArgs) -> Result<()> {
    let (inst, _) = args.source.load()?;
    let se = grid_search_se(&inst, args.resolution)?;
    println!(
        "evaluated {} grid points ({} skipped)",
        se.evaluated, se.skipped
    );
    for (k, rate) in se.rates_bits.iter().enumerate() {
        println!("user {}: rate {:.6} bits", k + 1, rate);
    }
    if let Some(path) = &args.out {
        write_allocation_csv(std::slice::from_ref(&se.leader_allocation), path)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_ensemble(args: EnsembleArgs) -> Result<()> {
    let config = args.channel.load_config()?;
    let params = args.channel.params(&config);
    let opts = args.crm.options(&config);
    let users = args.channel.users;
    let (stats, reports) = run_ensemble(&params, users, &opts, args.base_seed, args.trials)?;

    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    emit_trials_csv(&reports, users, &args.out.join("trials.csv"))?;
    emit_stats_csv(&stats, &args.out.join("stats.csv"))?;
    for k in 0..users {
        emit_cdf_csv(
            &stats.ratio_ne_cdf[k],
            &args.out.join(format!("cdf_user{}_over_ne.csv", k + 1)),
        )?;
    }
    if let Some(se_cdf) = &stats.ratio_se_cdf {
        for (k, samples) in se_cdf.iter().enumerate() {
            emit_cdf_csv(samples, &args.out.join(format!("cdf_user{}_over_se.csv", k + 1)))?;
        }
    }

    println!(
        "{} trials: {} accepted, {} rejected",
        stats.trials, stats.accepted, stats.rejected
    );
    println!(
        "identical to water-filling: {:.1}%",
        100.0 * stats.frac_identical_to_iw
    );
    for (k, imp) in stats.mean_improvement.iter().enumerate() {
        println!("user {} mean improvement: {:+.2}%", k + 1, 100.0 * imp);
    }
    println!("mean iterations: {:.2}", stats.mean_iterations);
    println!("wrote CSV reports under {}", args.out.display());
    Ok(())
}

fn write_allocation_csv(
    allocations: &[waterfill_games::PowerAllocation],
    path: &Path,
) -> Result<()> {
    let mut out = String::from("bin");
    for a in allocations {
        let _ = write!(out, ",P{}", a.owner + 1);
    }
    out.push('\n');
    let bins = allocations.first().map(|a| a.power.len()).unwrap_or(0);
    for n in 0..bins {
        let _ = write!(out, "{}", n + 1);
        for a in allocations {
            let _ = write!(out, ",{:.9e}", a.power[n]);
        }
        out.push('\n');
    }
    std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

fn write_trace_csv(trace: &waterfill_games::CrmTrace, path: &Path) -> Result<()> {
    let mut out = String::from(
        "iter,v_star,rate_start_bits,rate_after_bits,eta,duality_gap_nats,sc1,residual_max,clamp_warnings,kink_bins\n",
    );
    for (t, it) in trace.iterations.iter().enumerate() {
        let _ = writeln!(
            out,
            "{},{:.6},{:.9e},{:.9e},{:.9e},{:.3e},{},{:.3e},{},{}",
            t + 1,
            it.v_star,
            it.rate_start_bits,
            it.rate_after_bits,
            it.eta,
            it.duality_gap_nats,
            it.sc1,
            it.residual_max_norm,
            it.clamp_warnings,
            it.kink_bins
        );
    }
    std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}
