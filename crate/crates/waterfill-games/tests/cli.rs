//! End-to-end checks of the `wfg` binary: subcommands, file formats, config
//! precedence, and exit codes.

use std::path::Path;
use std::process::Command;

fn wfg() -> Command {
    Command::new(env!("CARGO_BIN_EXE_wfg"))
}

fn run_ok(cmd: &mut Command) -> String {
    let out = cmd.output().expect("spawn wfg");
    assert!(
        out.status.success(),
        "command failed: {:?}\nstdout: {}\nstderr: {}",
        cmd,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr),
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn gen_solve_crm_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let inst_path = dir.path().join("inst.txt");

    let out = run_ok(wfg()
        .args(["gen", "--seed", "11", "--bins", "12", "--budget", "12"])
        .arg("--out")
        .arg(&inst_path));
    assert!(out.contains("2 users, 12 bins"));

    // Instance files round-trip through the library parser.
    let inst = waterfill_games::read_instance(&inst_path).unwrap();
    assert_eq!(inst.num_bins, 12);
    let regen = waterfill_games::generate_instance(
        &waterfill_games::ChannelModelParams {
            num_bins: 12,
            budget_per_user: 12.0,
            ..waterfill_games::ChannelModelParams::two_user()
        },
        2,
        11,
    )
    .unwrap();
    assert_eq!(inst.noise, regen.noise);

    let ne_csv = dir.path().join("ne.csv");
    let out = run_ok(wfg()
        .arg("solve-ne")
        .arg("--instance")
        .arg(&inst_path)
        .arg("--out")
        .arg(&ne_csv));
    assert!(out.contains("converged: true"));
    let csv = std::fs::read_to_string(&ne_csv).unwrap();
    assert!(csv.starts_with("bin,P1,P2"));
    assert_eq!(csv.lines().count(), 13);

    let trace_csv = dir.path().join("trace.csv");
    let out = run_ok(wfg()
        .arg("crm")
        .arg("--instance")
        .arg(&inst_path)
        .args(["--trust-radius", "1.0"])
        .arg("--out")
        .arg(&trace_csv));
    assert!(out.contains("user 1: NE"));
    assert!(std::fs::read_to_string(&trace_csv)
        .unwrap()
        .starts_with("iter,v_star,rate_start_bits"));
}

#[test]
fn se_grid_runs_on_desk_scale_and_rejects_large() {
    // Zero cross power keeps the instance inside the uniqueness screen.
    let out = run_ok(wfg().args([
        "se-grid",
        "--seed",
        "3",
        "--bins",
        "2",
        "--budget",
        "4",
        "--cross-power",
        "0.0",
        "--resolution",
        "100",
    ]));
    assert!(out.contains("user 1: rate"));

    let status = wfg()
        .args(["se-grid", "--seed", "3", "--bins", "8"])
        .output()
        .unwrap();
    assert!(!status.status.success(), "desk-scale guard must fail loudly");
}

#[test]
fn ensemble_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("ens");
    let out = run_ok(wfg()
        .args([
            "ensemble",
            "--trials",
            "6",
            "--bins",
            "8",
            "--budget",
            "8",
            "--base-seed",
            "5",
        ])
        .arg("--out")
        .arg(&out_dir));
    assert!(out.contains("6 trials"));
    for file in ["trials.csv", "stats.csv", "cdf_user1_over_ne.csv", "cdf_user2_over_ne.csv"] {
        assert!(out_dir.join(file).exists(), "{file} missing");
    }
    let trials = std::fs::read_to_string(out_dir.join("trials.csv")).unwrap();
    assert!(trials.starts_with("seed,accepted,iters,stop_reason,ce,R1_ne,R1_crm,R1_se"));
    assert_eq!(trials.lines().count(), 7);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.toml");
    std::fs::write(
        &cfg,
        "[channel]\nnum_bins = 4\nbudget_per_user = 4.0\n\n[crm]\nmax_outer_iter = 3\n",
    )
    .unwrap();

    // Config alone: 4 bins.
    let inst_a = dir.path().join("a.txt");
    run_ok(wfg()
        .args(["gen", "--seed", "1"])
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&inst_a));
    assert!(header_dims(&inst_a).ends_with(" 4"));

    // Flag overrides config: 6 bins.
    let inst_b = dir.path().join("b.txt");
    run_ok(wfg()
        .args(["gen", "--seed", "1", "--bins", "6"])
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&inst_b));
    assert!(header_dims(&inst_b).ends_with(" 6"));

    // Unknown config keys are a hard error (nonzero exit).
    std::fs::write(&cfg, "[channel]\nnum_bin = 4\n").unwrap();
    let out = wfg()
        .args(["gen", "--seed", "1"])
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("c.txt"))
        .output()
        .unwrap();
    assert!(!out.status.success());
}

fn header_dims(path: &Path) -> String {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .next()
        .unwrap()
        .to_string()
}
