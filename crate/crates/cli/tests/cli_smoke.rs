//! Exit-code and flag contracts of the `uasnet` binary.

use std::process::Command;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_uasnet")
}

fn tmp(tag: &str) -> std::path::PathBuf {
    let dir = std::path::PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(format!("smoke-{tag}"));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn unknown_flag_is_usage_error() {
    let out = Command::new(bin())
        .args(["generate", "--frobnicate"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.starts_with("error[E1]:"), "stderr: {stderr}");
}

#[test]
fn missing_config_is_usage_error() {
    let out = Command::new(bin())
        .args(["train", "--config", "/definitely/not/here.toml"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn count_zero_writes_valid_empty_manifest() {
    let dir = tmp("empty");
    let out = Command::new(bin())
        .args(["generate", "--out", dir.to_str().unwrap(), "--count", "0"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let manifest = uasnet_core::data::read_manifest(&dir).unwrap();
    assert_eq!(manifest.samples.len(), 0);
    assert_eq!(manifest.patch_size, 64);
}

#[test]
fn generate_rejects_bad_profile() {
    let dir = tmp("badprofile");
    let out = Command::new(bin())
        .args([
            "generate",
            "--out",
            dir.to_str().unwrap(),
            "--count",
            "1",
            "--profile",
            "bogus",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn zero_jitter_gives_identical_masks() {
    let dir = tmp("zeroj");
    let out = Command::new(bin())
        .args([
            "generate",
            "--out",
            dir.to_str().unwrap(),
            "--count",
            "2",
            "--seed",
            "3",
            "--patch-size",
            "32",
            "--zero-jitter",
            "-600",
        ])
        .output()
        .unwrap();
    assert!(out.status.success());
    let dataset = uasnet_core::data::Dataset::open(&dir).unwrap();
    for entry in &dataset.manifest.samples {
        let set = dataset.load(entry).unwrap();
        for m in &set.masks[1..] {
            assert_eq!(m, &set.masks[0]);
        }
    }
}

#[test]
fn predict_without_masks_emits_predictions_only() {
    let dir = tmp("nomask");
    // build a dataset, then strip the masks from one sample
    let gen = Command::new(bin())
        .args([
            "generate",
            "--out",
            dir.join("ds").to_str().unwrap(),
            "--count",
            "4",
            "--seed",
            "21",
            "--patch-size",
            "32",
        ])
        .output()
        .unwrap();
    assert!(gen.status.success());

    // a tiny training run to obtain a checkpoint
    let cfg = dir.join("cfg.toml");
    std::fs::write(
        &cfg,
        format!(
            r#"run_name = "nomask"
seed = 2
epochs = 1
batch_size = 4
jap_enabled = false
patch_size = 32
fold = 0
dataset = "{}"
out_dir = "{}"

[model]
kind = "uasnet"

[model.arch]
widths = [16, 16, 16, 16, 16]
bottleneck_width = 16
fa_cat_placement = [0]
otsu_masked = false
"#,
            dir.join("ds").display(),
            dir.join("runs").display()
        ),
    )
    .unwrap();
    // 4 samples cannot stratify into 5 folds; expect a data error here
    let train = Command::new(bin())
        .args(["train", "--config", cfg.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(train.status.code(), Some(2), "stratum too small maps to data error");

    // regenerate with enough samples and retrain
    let gen = Command::new(bin())
        .args([
            "generate",
            "--out",
            dir.join("ds").to_str().unwrap(),
            "--count",
            "12",
            "--seed",
            "21",
            "--patch-size",
            "32",
            "--balanced",
        ])
        .output()
        .unwrap();
    assert!(gen.status.success());
    let train = Command::new(bin())
        .args(["train", "--config", cfg.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(
        train.status.success(),
        "train failed: {}",
        String::from_utf8_lossy(&train.stderr)
    );

    // strip annotations from a sample copy: meta says 0 masks is invalid, so
    // emulate an unannotated sample with n_annotations = 1 removed instead
    let src = dir.join("ds").join("p00000");
    let bare = dir.join("bare-sample");
    std::fs::create_dir_all(&bare).unwrap();
    std::fs::copy(src.join("image.f32"), bare.join("image.f32")).unwrap();
    std::fs::write(
        bare.join("meta.json"),
        r#"{"height":32,"width":32,"n_annotations":0,"malignancy":"benign","hu_offset":0.0}"#,
    )
    .unwrap();
    let ckpt = dir
        .join("runs")
        .join("nomask")
        .join("checkpoints")
        .join("best.ckpt");
    let out_dir = dir.join("pred");
    let pred = Command::new(bin())
        .args([
            "predict",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--sample",
            bare.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(
        pred.status.success(),
        "predict failed: {}",
        String::from_utf8_lossy(&pred.stderr)
    );
    let names: Vec<String> = std::fs::read_dir(&out_dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().to_string())
        .collect();
    assert!(names.iter().any(|n| n == "p_union.png"));
    assert!(
        !names.iter().any(|n| n.starts_with("s_")),
        "no standard maps without annotations: {names:?}"
    );
}

#[test]
fn run_lock_blocks_concurrent_use() {
    let dir = tmp("lock");
    let gen = Command::new(bin())
        .args([
            "generate",
            "--out",
            dir.join("ds").to_str().unwrap(),
            "--count",
            "12",
            "--seed",
            "5",
            "--patch-size",
            "32",
            "--balanced",
        ])
        .output()
        .unwrap();
    assert!(gen.status.success());
    let cfg = dir.join("cfg.toml");
    std::fs::write(
        &cfg,
        format!(
            r#"run_name = "locked"
seed = 2
epochs = 1
batch_size = 4
jap_enabled = false
patch_size = 32
fold = 0
dataset = "{}"
out_dir = "{}"

[model]
kind = "uasnet"

[model.arch]
widths = [16, 16, 16, 16, 16]
bottleneck_width = 16
fa_cat_placement = [0]
otsu_masked = false
"#,
            dir.join("ds").display(),
            dir.join("runs").display()
        ),
    )
    .unwrap();
    let run_dir = dir.join("runs").join("locked");
    std::fs::create_dir_all(&run_dir).unwrap();
    std::fs::write(run_dir.join(".lock"), b"").unwrap();
    let out = Command::new(bin())
        .args(["train", "--config", cfg.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("locked"), "stderr: {stderr}");
}
