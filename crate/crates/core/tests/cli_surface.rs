//! Exit codes, error paths, and config handling of the `infocons` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_infocons"));
    c.env_remove("INFOCONS_SEED");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).display().to_string()
}

#[test]
fn usage_errors_exit_2() {
    let out = run(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2), "unknown subcommand");

    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "gen-data",
        "--classes",
        "9",
        "--out",
        &p(dir.path(), "d"),
    ]);
    assert_eq!(out.status.code(), Some(2), "class count out of range");
}

#[test]
fn unknown_method_lists_valid_ones() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("in.xyz"), "0 0 0\n1 0 0\n0 1 0\n0 0 1\n").unwrap();
    // model path checked lazily after method parse? method validation needs
    // a model load first, so provide a bogus model and expect the checkpoint
    // error; then check the method error with a real pipeline is covered by
    // the acceptance determinism stage. Here: bad method against a missing
    // model still reports usage once the model loads -- so validate via a
    // trained fixture instead.
    let data = p(dir.path(), "data");
    assert!(run(&[
        "gen-data", "--classes", "2", "--per-class", "6", "--per-class-test", "2", "--points",
        "16", "--seed", "1", "--out", &data
    ])
    .status
    .success());
    let model = p(dir.path(), "model");
    assert!(run(&["train", "--data", &data, "--epochs", "1", "--batch", "4", "--out", &model])
        .status
        .success());
    let out = run(&[
        "explain",
        "--model",
        &format!("{model}/model.ckpt"),
        "--input",
        &p(dir.path(), "in.xyz"),
        "--method",
        "shapley",
        "--out",
        &p(dir.path(), "e"),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    for valid in ["infocons", "cp++", "pcsam", "lime3d", "random"] {
        assert!(stderr.contains(valid), "{stderr} should list {valid}");
    }
}

#[test]
fn existing_output_requires_force() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = p(dir.path(), "d");
    let first = run(&[
        "gen-data", "--classes", "1", "--per-class", "2", "--per-class-test", "1", "--points",
        "16", "--out", &out_dir,
    ]);
    assert!(first.status.success());
    let second = run(&[
        "gen-data", "--classes", "1", "--per-class", "2", "--per-class-test", "1", "--points",
        "16", "--out", &out_dir,
    ]);
    assert_eq!(second.status.code(), Some(3));
    let forced = run(&[
        "gen-data", "--classes", "1", "--per-class", "2", "--per-class-test", "1", "--points",
        "16", "--out", &out_dir, "--force",
    ]);
    assert!(forced.status.success());
}

#[test]
fn missing_checkpoint_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "train-explainer",
        "--model",
        &p(dir.path(), "nope.ckpt"),
        "--data",
        &p(dir.path(), "nodata"),
        "--out",
        &p(dir.path(), "e"),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn minimal_point_count_dataset_is_valid() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "gen-data", "--classes", "2", "--per-class", "2", "--per-class-test", "1", "--points",
        "8", "--out", &p(dir.path(), "d"),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("d/train/c1_00001.xyz").exists());
}

#[test]
fn same_seed_gives_byte_identical_datasets() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a", "b"] {
        assert!(run(&[
            "gen-data", "--classes", "2", "--per-class", "3", "--per-class-test", "2",
            "--points", "24", "--seed", "42", "--out", &p(dir.path(), name),
        ])
        .status
        .success());
    }
    let fa = fs::read(dir.path().join("a/train/c0_00000.xyz")).unwrap();
    let fb = fs::read(dir.path().join("b/train/c0_00000.xyz")).unwrap();
    assert_eq!(fa, fb);
}

#[test]
fn env_seed_overrides_flag() {
    let dir = tempfile::tempdir().unwrap();
    let mk = |name: &str, seed_flag: &str, env: Option<&str>| {
        let mut c = bin();
        c.args([
            "gen-data", "--classes", "1", "--per-class", "2", "--per-class-test", "1",
            "--points", "16", "--seed", seed_flag, "--out", &p(dir.path(), name),
        ]);
        match env {
            Some(v) => c.env("INFOCONS_SEED", v),
            None => c.env_remove("INFOCONS_SEED"),
        };
        assert!(c.output().unwrap().status.success());
        fs::read(dir.path().join(name).join("train/c0_00000.xyz")).unwrap()
    };
    let plain = mk("s9", "9", None);
    let overridden = mk("s1env9", "1", Some("9"));
    assert_eq!(plain, overridden, "INFOCONS_SEED must override --seed");
    // manifest echoes the resolved seed
    let manifest = fs::read_to_string(dir.path().join("s1env9/run_manifest.txt")).unwrap();
    assert!(manifest.contains("seed=9"), "{manifest}");
}

#[test]
fn config_file_supplies_defaults_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("base.cfg");
    fs::write(&cfg, "classes=1\nper-class=2\nper-class-test=1\npoints=32\nseed=4\n").unwrap();
    let out_dir = p(dir.path(), "out");
    assert!(run(&[
        "gen-data",
        "--config",
        cfg.to_str().unwrap(),
        "--points",
        "16",
        "--out",
        &out_dir,
    ])
    .status
    .success());
    let manifest = fs::read_to_string(dir.path().join("out/run_manifest.txt")).unwrap();
    assert!(manifest.contains("points=16"), "flag beats config: {manifest}");
    assert!(manifest.contains("seed=4"), "config supplies seed: {manifest}");
}
