//! End-to-end checks of the installed binary: flag parsing, header
//! round-trips, determinism across thread counts, and failure behaviour.

use std::path::Path;
use std::process::{Command, Output};

use postsel::config::{DesignConfig, JobConfig};
use postsel::report::read_embedded_config;
use postsel::special::Dof;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_postsel"))
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    bin()
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary spawns")
}

#[test]
fn help_and_version_exit_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run_in(dir.path(), &["--help"]).status.code(), Some(0));
    assert_eq!(run_in(dir.path(), &["--version"]).status.code(), Some(0));
    assert_eq!(run_in(dir.path(), &["constants", "--help"]).status.code(), Some(0));
}

#[test]
fn bad_arguments_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    // Unknown flag: clap error.
    assert_eq!(
        run_in(dir.path(), &["constants", "--bogus"]).status.code(),
        Some(2)
    );
    // No subcommand, no config file.
    assert_eq!(run_in(dir.path(), &[]).status.code(), Some(2));
    // Domain error in a value.
    let out = run_in(
        dir.path(),
        &["constants", "--design", "two-column", "--rho", "1.5"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
}

#[test]
fn the_header_reconstructs_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("k.csv");
    let out = run_in(
        dir.path(),
        &[
            "--seed",
            "5",
            "constants",
            "--design",
            "two-column",
            "--rho",
            "0.9",
            "--draws",
            "4000",
            "--c",
            "sqrt2",
            "--out",
            "k.csv",
        ],
    );
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = std::fs::read_to_string(&out_path).unwrap();
    assert!(text.starts_with('#'));

    let config = read_embedded_config(&text).unwrap();
    assert_eq!(config.seed, 5);
    assert_eq!(config.alpha, 0.05);
    let JobConfig::Constants { design, r, draws, c } = &config.job else {
        panic!("expected a constants job in the header");
    };
    assert_eq!(design, &DesignConfig::TwoColumn { rho: 0.9, n: None });
    assert_eq!(*r, Dof::Infinite);
    assert_eq!(*draws, 4000);
    assert!(c.is_some());

    // Six rows: the five standard constants plus the optimal-nested one.
    let data_lines: Vec<&str> =
        text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(data_lines.len(), 1 + 6);
    assert_eq!(data_lines[0], "k_kind,k_value,mc_se,alpha,r");

    // Replaying the embedded config through the library reproduces the
    // file byte for byte.
    let replay = dir.path().join("replay.csv");
    postsel::cli::run(&config, &replay, None).unwrap();
    assert_eq!(std::fs::read(&out_path).unwrap(), std::fs::read(&replay).unwrap());
}

#[test]
fn thread_count_never_changes_the_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let args_base = [
        "--seed",
        "11",
        "exact",
        "--figure",
        "1",
        "--rho",
        "0.6",
        "--zeta-points",
        "5",
        "--draws",
        "2000",
    ];
    for (threads, name) in [("1", "a.csv"), ("4", "b.csv")] {
        let mut args = args_base.to_vec();
        args.extend_from_slice(&["--threads", threads, "--out", name]);
        let out = run_in(dir.path(), &args);
        assert!(
            out.status.success(),
            "stderr: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let a = std::fs::read(dir.path().join("a.csv")).unwrap();
    let b = std::fs::read(dir.path().join("b.csv")).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b);
}

#[test]
fn config_files_round_trip_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("job.toml");
    std::fs::write(
        &config_path,
        "seed = 7\nalpha = 0.05\n\n[job]\ncommand = \"exact\"\nfigure = 1\nrho = [0.3]\nzeta-points = 4\ndraws = 1500\n",
    )
    .unwrap();

    let out = run_in(
        dir.path(),
        &["--config", "job.toml", "--out", "file.csv"],
    );
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );

    // Same run with a flag override: different zeta grid, same header shape.
    let out = run_in(
        dir.path(),
        &[
            "--config",
            "job.toml",
            "exact",
            "--zeta-points",
            "6",
            "--out",
            "override.csv",
        ],
    );
    assert!(out.status.success());
    let base = std::fs::read_to_string(dir.path().join("file.csv")).unwrap();
    let over = std::fs::read_to_string(dir.path().join("override.csv")).unwrap();
    let rows = |t: &str| t.lines().filter(|l| !l.starts_with('#')).count() - 1;
    // 4 kinds x zeta points x two targets.
    assert_eq!(rows(&base), 4 * 4 * 2);
    assert_eq!(rows(&over), 4 * 6 * 2);

    // A config for a different command cannot be bent with a mismatched
    // subcommand.
    assert_eq!(
        run_in(dir.path(), &["--config", "job.toml", "constants"]).status.code(),
        Some(2)
    );
}

#[test]
fn malformed_configs_leave_no_partial_output() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("broken.toml");
    std::fs::write(&config_path, "seed = \"not a number\"").unwrap();
    let out = run_in(
        dir.path(),
        &["--config", "broken.toml", "--out", "should_not_exist.csv"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("should_not_exist.csv").exists());
    // No stray temp files either.
    let leftovers: Vec<_> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n != "broken.toml")
        .collect();
    assert!(leftovers.is_empty(), "unexpected files: {leftovers:?}");
}

#[test]
fn validity_sweep_reports_every_cell() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(
        dir.path(),
        &[
            "--seed",
            "3",
            "validate-appendix",
            "--design",
            "exchangeable",
            "--p",
            "3",
            "--param",
            "0.4",
            "--rules",
            "2",
            "--points",
            "2",
            "--replications",
            "4000",
            "--out",
            "sweep.csv",
        ],
    );
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let lines: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(lines[0], "selector_id,v_seed,threshold,point,rate,se,pass");
    assert_eq!(lines.len(), 1 + 2 * 2);
    for row in &lines[1..] {
        assert!(row.ends_with(",pass"), "validity failed: {row}");
    }
}
