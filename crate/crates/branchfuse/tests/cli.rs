//! End-to-end checks of the command-line surface.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use branchfuse::blocks::{fuse_block, BlockParams};
use branchfuse::io::{load_spec, load_weights};
use branchfuse::tensor::ElementType;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_branchfuse"))
}

fn sample_spec() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("samples/dbb_small.toml")
}

fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

fn value_of(out: &str, key: &str) -> String {
    out.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("missing {key}= line in:\n{out}"))
        .to_string()
}

#[test]
fn fuse_workflow_roundtrips() {
    let dir = tempfile::tempdir().unwrap();
    let weights = dir.path().join("block.weights");
    let fused = dir.path().join("fused.weights");

    let out = bin()
        .args(["init", "--spec"])
        .arg(sample_spec())
        .arg("--out")
        .arg(&weights)
        .args(["--seed", "3", "--randomize"])
        .output()
        .unwrap();
    assert!(out.status.success(), "init failed: {out:?}");

    let out = bin()
        .args(["fuse", "--spec"])
        .arg(sample_spec())
        .arg("--weights")
        .arg(&weights)
        .arg("--out")
        .arg(&fused)
        .args(["--seed", "5"])
        .output()
        .unwrap();
    assert!(out.status.success(), "fuse failed: {out:?}");
    let text = stdout(&out);
    assert_eq!(value_of(&text, "fused_kernel_shape"), "16x8x3x3");
    let err: f64 = value_of(&text, "spot_check_max_abs_err").parse().unwrap();
    assert!(err <= 1e-10, "spot check error {err}");
    assert_eq!(value_of(&text, "pass"), "true");

    // The written manifest must reproduce the in-process fusion bitwise.
    let spec = load_spec(sample_spec()).unwrap();
    let block = load_weights(&weights, &spec).unwrap();
    let expected = fuse_block(&block).unwrap();
    let fused_spec = load_spec(dir.path().join("fused.weights.spec")).unwrap();
    let loaded = load_weights(&fused, &fused_spec).unwrap();
    let wrapped = BlockParams::from_single_conv(expected).unwrap();
    assert_eq!(loaded, wrapped);
}

#[test]
fn fuse_with_bad_path_exits_two() {
    let out = bin()
        .args([
            "fuse",
            "--spec",
            "/nonexistent/spec.toml",
            "--weights",
            "/nonexistent/w",
            "--out",
            "/tmp/unused.weights",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}

#[test]
fn fuse_with_mismatched_spec_names_the_entry() {
    let dir = tempfile::tempdir().unwrap();
    let weights = dir.path().join("block.weights");

    let out = bin()
        .args(["init", "--spec"])
        .arg(sample_spec())
        .arg("--out")
        .arg(&weights)
        .output()
        .unwrap();
    assert!(out.status.success());

    // Weights saved for the dense sample, loaded against the depthwise spec.
    let other_spec = Path::new(env!("CARGO_MANIFEST_DIR")).join("samples/dbb_depthwise.toml");
    let out = bin()
        .args(["fuse", "--spec"])
        .arg(&other_spec)
        .arg("--weights")
        .arg(&weights)
        .arg("--out")
        .arg(dir.path().join("fused.weights"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("branch"), "stderr: {stderr}");
}

#[test]
fn verify_is_deterministic_and_passes() {
    let run = || {
        bin()
            .args(["verify", "--trials", "45", "--seed", "9"])
            .output()
            .unwrap()
    };
    let a = run();
    assert!(a.status.success(), "verify failed: {a:?}");
    let text = stdout(&a);
    assert_eq!(value_of(&text, "failures"), "0");
    assert_eq!(value_of(&text, "pass"), "true");
    assert_eq!(value_of(&text, "seed"), "9");

    let b = run();
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn verify_seed_comes_from_environment() {
    let out = bin()
        .args(["verify", "--trials", "16"])
        .env("BRANCHFUSE_SEED", "77")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(value_of(&stdout(&out), "seed"), "77");
}

#[test]
fn count_params_matches_published_numbers() {
    let out = bin()
        .args(["count-params", "resnet18", "dbb", "training"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let millions: f64 = value_of(&stdout(&out), "params_millions").parse().unwrap();
    assert!((millions - 26.33).abs() <= 0.05, "got {millions}");

    let out = bin()
        .args(["count-params", "resnet18", "baseline", "inference"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let millions: f64 = value_of(&stdout(&out), "params_millions").parse().unwrap();
    assert!((millions - 11.68).abs() <= 0.05, "got {millions}");
}

#[test]
fn count_params_rejects_unknown_variant() {
    let out = bin()
        .args(["count-params", "resnet18", "nope", "training"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bench_reports_fused_faster() {
    let out = bin()
        .args(["bench", "--spec"])
        .arg(sample_spec())
        .args(["--input", "1,8,24,24", "--repeats", "5", "--seed", "2"])
        .output()
        .unwrap();
    assert!(out.status.success(), "bench failed: {out:?}");
    let text = stdout(&out);
    let branched: f64 = value_of(&text, "branched_ms").parse().unwrap();
    let fused: f64 = value_of(&text, "fused_ms").parse().unwrap();
    assert!(branched > 0.0 && fused > 0.0);
    assert!(fused < branched, "fused {fused}ms vs branched {branched}ms");
}

#[test]
fn missing_subcommand_exits_two() {
    let out = bin().output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn init_supports_f32_payloads() {
    let dir = tempfile::tempdir().unwrap();
    let weights = dir.path().join("block32.weights");
    let out = bin()
        .args(["init", "--spec"])
        .arg(sample_spec())
        .arg("--out")
        .arg(&weights)
        .args(["--dtype", "f32", "--seed", "4", "--randomize"])
        .output()
        .unwrap();
    assert!(out.status.success(), "init failed: {out:?}");

    let spec = load_spec(sample_spec()).unwrap();
    let block = load_weights(&weights, &spec).unwrap();
    // An f32 payload reloads to values that are exactly f32-representable.
    assert_eq!(block.round_to_f32(), block);
    let _ = ElementType::F32;
}
