//! End-to-end tests of the `dpdiff` binary: every subcommand runs against
//! tiny configurations, artifacts land where promised, and failures exit
//! nonzero with a single `error:` line.

use std::path::Path;
use std::process::{Command, Output};

fn dpdiff(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dpdiff"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn tiny_overrides<'a>(extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec![
        "--set",
        "run.steps=6",
        "--set",
        "run.val_every=0",
        "--set",
        "data.n=200",
    ];
    v.extend_from_slice(extra);
    v
}

#[test]
fn train_writes_artifacts_and_reports_paths() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "--out", "run1"];
    args.extend(tiny_overrides(&[]));
    let out = dpdiff(&args, dir.path());
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(dir.path().join("run1/checkpoint.txt").exists());
    assert!(dir.path().join("run1/grad_log.csv").exists());
    assert!(dir.path().join("run1/train_report.txt").exists());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("checkpoint:"), "{stdout}");
}

#[test]
fn bad_config_fails_with_one_error_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = dpdiff(&["train", "--set", "run.stepz=10"], dir.path());
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert_eq!(stderr.lines().count(), 1, "{stderr}");
    assert!(stderr.starts_with("error: "), "{stderr}");
    assert!(stderr.contains("stepz"), "{stderr}");
}

#[test]
fn diagnose_compares_and_refuses_mismatched_c() {
    let dir = tempfile::tempdir().unwrap();
    for (mode, out_dir) in [("dp_vanilla", "van"), ("dp_aware", "aw")] {
        let mode_arg = format!("run.mode={mode}");
        let mut args = vec!["train", "--out", out_dir];
        args.extend(tiny_overrides(&["--set", &mode_arg]));
        let out = dpdiff(&args, dir.path());
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let out = dpdiff(
        &[
            "diagnose",
            "--vanilla",
            "van/grad_log.csv",
            "--aware",
            "aw/grad_log.csv",
            "--out",
            "diag",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("S_other S_cond S_total rho_emp rho_cond"), "{stdout}");
    assert!(dir.path().join("diag/ecdf_vanilla.csv").exists());
    assert!(dir.path().join("diag/ecdf_aware.csv").exists());

    // Mismatched clip thresholds are refused.
    let mut args = vec!["train", "--out", "van2"];
    args.extend(tiny_overrides(&["--set", "run.mode=dp_vanilla", "--set", "dp.clip_c=2.0"]));
    assert!(dpdiff(&args, dir.path()).status.success());
    let out = dpdiff(
        &[
            "diagnose",
            "--vanilla",
            "van2/grad_log.csv",
            "--aware",
            "aw/grad_log.csv",
            "--out",
            "diag2",
        ],
        dir.path(),
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("clip thresholds differ"));
}

#[test]
fn evaluate_scores_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "--out", "run"];
    args.extend(tiny_overrides(&["--set", "data.n=400"]));
    assert!(dpdiff(&args, dir.path()).status.success());
    for task in ["interpolation", "forecasting"] {
        let out = dpdiff(
            &[
                "evaluate",
                "--checkpoint",
                "run/checkpoint.txt",
                "--task",
                task,
                "--out",
                &format!("eval_{task}"),
            ],
            dir.path(),
        );
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let stdout = String::from_utf8_lossy(&out.stdout);
        assert!(stdout.contains("point_rmse ="), "{stdout}");
        assert!(dir.path().join(format!("eval_{task}/metrics_report.txt")).exists());
    }
    let out = dpdiff(
        &["evaluate", "--checkpoint", "run/checkpoint.txt", "--task", "osmosis"],
        dir.path(),
    );
    assert!(!out.status.success());
}

#[test]
fn ablate_emits_expected_rows() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["ablate", "--axis", "tightness", "--out", "abl"];
    args.extend(tiny_overrides(&["--set", "run.steps=3"]));
    let out = dpdiff(&args, dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    for scale in ["1.00", "0.90", "0.75", "0.50"] {
        assert!(stdout.contains(&format!("scale {scale}")), "{stdout}");
    }

    let mut args = vec!["ablate", "--axis", "components", "--out", "abl2"];
    args.extend(tiny_overrides(&["--set", "run.steps=3"]));
    let out = dpdiff(&args, dir.path());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success());
    for name in [
        "DP-vanilla",
        "DP-aware (only c-bounding)",
        "DP-aware (only AdaLN bounding)",
        "DP-aware (full)",
    ] {
        assert!(stdout.contains(name), "{stdout}");
    }

    let out = dpdiff(&["ablate", "--axis", "sideways"], dir.path());
    assert!(!out.status.success());
}

#[test]
fn bounds_report_contains_dominance_line() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["bounds", "--calibration-steps", "5", "--out", "bnd"];
    args.extend(tiny_overrides(&[]));
    let out = dpdiff(&args, dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("S_aware ="), "{stdout}");
    assert!(stdout.contains("dominance = holds"), "{stdout}");
    assert!(stdout.contains("convex_ratio ="), "{stdout}");
    assert!(dir.path().join("bnd/bound_report.txt").exists());
}

#[test]
fn config_file_plus_overrides() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("cfg.txt"),
        "[run]\nprofile = desk\nsteps = 4\nval_every = 0\n[data]\nn = 160\n",
    )
    .unwrap();
    let out = dpdiff(
        &[
            "train",
            "--config",
            "cfg.txt",
            "--set",
            "run.seed=42",
            "--out",
            "run",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = std::fs::read_to_string(dir.path().join("run/checkpoint.txt")).unwrap();
    assert!(ckpt.contains("seed = 42"));
    assert!(ckpt.contains("steps = 4"));
}
