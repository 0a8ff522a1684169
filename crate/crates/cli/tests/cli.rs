//! End-to-end tests of the `migs` binary: pipeline plumbing, run-directory
//! layout, config validation, and the B = N degeneracy.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn migs() -> Command {
    Command::new(env!("CARGO_BIN_EXE_migs"))
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn migs");
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

#[test]
fn verify_passes() {
    let out = run_ok(migs().arg("verify"));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("all checks passed"), "stdout: {stdout}");
}

#[test]
fn unknown_config_key_is_rejected_with_its_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "version = 1\n[record]\nrunz = 3\n").unwrap();
    let out = migs().arg("--config").arg(&cfg).arg("verify").output().unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("runz"), "stderr: {stderr}");
}

#[test]
fn unsupported_config_version_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("v9.toml");
    fs::write(&cfg, "version = 9\n").unwrap();
    let out = migs().arg("--config").arg(&cfg).arg("verify").output().unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("version"), "stderr: {stderr}");
}

#[test]
fn missing_checkpoint_is_a_descriptive_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = migs()
        .arg("record")
        .arg("--base")
        .arg(dir.path().join("nope.mslb"))
        .arg("--out")
        .arg(dir.path().join("run"))
        .output()
        .unwrap();
    assert!(!out.status.success());
}

fn assert_run_dir(root: &Path) {
    assert!(root.join("config.toml").is_file(), "missing config copy in {}", root.display());
    let manifest = fs::read_to_string(root.join("manifest.json")).expect("manifest.json");
    assert!(manifest.contains("config_sha256"));
    assert!(manifest.contains("\"seed\""));
}

#[test]
fn pipeline_smoke_and_full_budget_degeneracy() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("quick.toml");
    fs::write(
        &cfg,
        r#"
version = 1
seed = 11

[train_base]
steps = 30

[train_shortcut]
steps = 20

[record]
runs = 8
n = 8

[bench]
budgets = [2, 4]
accelerators = ["cache_reuse", "taylor1"]
n = 8
latency_runs = 2
quality_samples = 256
"#,
    )
    .unwrap();
    let base_dir = dir.path().join("base");
    run_ok(migs().arg("--config").arg(&cfg).arg("train-base").arg("--out").arg(&base_dir));
    let base = base_dir.join("base.mslb");
    assert!(base.is_file());
    assert!(base_dir.join("reports/train_base.csv").is_file());
    assert_run_dir(&base_dir);

    let rec_dir = dir.path().join("rec");
    run_ok(
        migs()
            .arg("--config")
            .arg(&cfg)
            .arg("record")
            .arg("--base")
            .arg(&base)
            .arg("--out")
            .arg(&rec_dir),
    );
    let manifest = rec_dir.join("trajectories/manifest.tsv");
    assert!(manifest.is_file());
    let n_files = fs::read_dir(rec_dir.join("trajectories"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "mstrj"))
        .count();
    assert_eq!(n_files, 8);
    assert_run_dir(&rec_dir);

    let sc_dir = dir.path().join("sc");
    run_ok(
        migs()
            .arg("--config")
            .arg(&cfg)
            .arg("train-shortcut")
            .arg("--base")
            .arg(&base)
            .arg("--manifest")
            .arg(&manifest)
            .arg("--out")
            .arg(&sc_dir),
    );
    let shortcut = sc_dir.join("shortcut.mslb");
    assert!(shortcut.is_file());

    // B = N is the vanilla path: identical sample to a run without --B.
    let g_full = dir.path().join("gen-full");
    run_ok(
        migs()
            .arg("--config")
            .arg(&cfg)
            .arg("generate")
            .arg("--base")
            .arg(&base)
            .arg("--shortcut")
            .arg(&shortcut)
            .arg("--N")
            .arg("8")
            .arg("--B")
            .arg("8")
            .arg("--out")
            .arg(&g_full),
    );
    let g_vanilla = dir.path().join("gen-vanilla");
    run_ok(
        migs()
            .arg("--config")
            .arg(&cfg)
            .arg("generate")
            .arg("--base")
            .arg(&base)
            .arg("--N")
            .arg("8")
            .arg("--out")
            .arg(&g_vanilla),
    );
    let a = fs::read(g_full.join("reports/sample.txt")).unwrap();
    let b = fs::read(g_vanilla.join("reports/sample.txt")).unwrap();
    assert_eq!(a, b, "--B 8 --N 8 must match the vanilla run");

    // One Pareto row per (accelerator, budget) pair plus the vanilla row.
    let bench_dir = dir.path().join("bench");
    run_ok(
        migs()
            .arg("--config")
            .arg(&cfg)
            .arg("bench")
            .arg("--base")
            .arg(&base)
            .arg("--shortcut")
            .arg(&shortcut)
            .arg("--out")
            .arg(&bench_dir),
    );
    let csv = fs::read_to_string(bench_dir.join("reports/pareto.csv")).unwrap();
    let rows = csv.lines().count();
    assert_eq!(rows, 1 + 1 + 2 * 2, "header + vanilla + accelerators x budgets, got:\n{csv}");
}

#[test]
fn default_output_root_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(migs().env("MIGS_OUT_ROOT", dir.path()).arg("verify"));
    // verify writes nothing; train-base under the env root does.
    let cfg = dir.path().join("t.toml");
    fs::write(&cfg, "version = 1\n[train_base]\nsteps = 2\n").unwrap();
    run_ok(migs().env("MIGS_OUT_ROOT", dir.path()).arg("--config").arg(&cfg).arg("train-base"));
    let made: Vec<_> = fs::read_dir(dir.path())
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir() && e.file_name().to_string_lossy().starts_with("train-base-"))
        .collect();
    assert_eq!(made.len(), 1, "expected one run directory under the env root");
    assert_run_dir(&made[0].path());
}
