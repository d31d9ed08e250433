//! End-to-end runs of the `cyclestyle` binary against the bundled fixtures,
//! checking artifacts and the documented exit-code scheme
//! (0 ok, 2 validation, 3 divergence, 4 I/O).

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cyclestyle"))
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Trains a small checkpoint on the toy fixtures; reused by several tests.
fn train_small(dir: &Path, extra: &[&str]) -> (PathBuf, Output) {
    let ckpt = dir.join("toy.cst");
    let fx = fixtures();
    let mut cmd = bin();
    cmd.args([
        "train",
        "--image-a",
        fx.join("toy_a.png").to_str().unwrap(),
        "--image-b",
        fx.join("toy_b.png").to_str().unwrap(),
        "--mask-a",
        fx.join("toy_mask_a.png").to_str().unwrap(),
        "--mask-b",
        fx.join("toy_mask_b.png").to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
        "--base-channels",
        "8",
        "--seed",
        "1",
    ]);
    if !extra.contains(&"--steps") {
        cmd.args(["--steps", "8"]);
    }
    cmd.args(extra);
    let out = cmd.output().expect("spawn cyclestyle");
    (ckpt, out)
}

#[test]
fn train_stylize_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("train.jsonl");
    let (ckpt, out) = train_small(dir.path(), &["--log", log.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "train failed: {}", stderr(&out));
    assert!(
        stdout(&out).contains("config:"),
        "effective config not printed"
    );
    assert!(ckpt.exists());
    // The training log is JSON lines with the documented keys.
    let log_text = std::fs::read_to_string(&log).unwrap();
    let first: serde_json::Value = serde_json::from_str(log_text.lines().next().unwrap()).unwrap();
    for key in ["step", "subloss_id", "value", "lr", "wall_ms"] {
        assert!(first.get(key).is_some(), "log line missing {key}");
    }

    // Stylize the held-out image with its mask.
    let fx = fixtures();
    let styled = dir.path().join("styled.png");
    let out = bin()
        .args([
            "stylize",
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--input",
            fx.join("toy_unseen.png").to_str().unwrap(),
            "--mask",
            fx.join("toy_unseen_mask.png").to_str().unwrap(),
            "--direction",
            "to_a",
            "--out",
            styled.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "stylize failed: {}", stderr(&out));
    assert!(styled.exists());

    // Eval writes a report with all eight metric fields.
    let report = dir.path().join("report.json");
    let out = bin()
        .args([
            "eval",
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--out",
            report.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "eval failed: {}", stderr(&out));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    for key in [
        "self_psnr_a",
        "self_psnr_b",
        "cycle_psnr_a",
        "cycle_psnr_b",
        "style_gram_dist_to_a",
        "style_gram_dist_to_b",
        "sat_hist_dist_to_a",
        "sat_hist_dist_to_b",
    ] {
        assert!(report.get(key).is_some(), "report missing {key}");
    }
}

#[test]
fn retrain_on_second_pair_keeps_interface() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, out) = train_small(dir.path(), &[]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let fx = fixtures();
    let new_ckpt = dir.path().join("restyled.cst");
    let out = bin()
        .args([
            "retrain",
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--image-a",
            fx.join("toy2_a.png").to_str().unwrap(),
            "--image-b",
            fx.join("toy2_b.png").to_str().unwrap(),
            "--mask-a",
            fx.join("toy2_mask_a.png").to_str().unwrap(),
            "--mask-b",
            fx.join("toy2_mask_b.png").to_str().unwrap(),
            "--out",
            new_ckpt.to_str().unwrap(),
            "--steps",
            "6",
        ])
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "retrain failed: {}", stderr(&out));
    assert!(new_ckpt.exists());
}

#[test]
fn divergent_training_is_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let fx = fixtures();
    // λ_s at the edge of f64 overflows the first style term to infinity.
    let out = bin()
        .args([
            "train",
            "--image-a",
            fx.join("toy_a.png").to_str().unwrap(),
            "--image-b",
            fx.join("toy_b.png").to_str().unwrap(),
            "--out",
            dir.path().join("c.cst").to_str().unwrap(),
            "--steps",
            "6",
            "--base-channels",
            "4",
            "--lambda-s",
            "1e308",
        ])
        .output()
        .unwrap();
    assert_eq!(code(&out), 3, "stderr: {}", stderr(&out));
}

#[test]
fn single_region_checkpoint_stylizes_without_masks() {
    let dir = tempfile::tempdir().unwrap();
    let fx = fixtures();
    let ckpt = dir.path().join("one.cst");
    // No masks: the whole image is one region.
    let out = bin()
        .args([
            "train",
            "--image-a",
            fx.join("toy_a.png").to_str().unwrap(),
            "--image-b",
            fx.join("toy_b.png").to_str().unwrap(),
            "--out",
            ckpt.to_str().unwrap(),
            "--steps",
            "2",
            "--base-channels",
            "4",
        ])
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let styled = dir.path().join("s.png");
    let out = bin()
        .args([
            "stylize",
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--input",
            fx.join("toy_unseen.png").to_str().unwrap(),
            "--direction",
            "to_a",
            "--out",
            styled.to_str().unwrap(),
            "--depth",
            "16",
        ])
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(styled.exists());
}

#[test]
fn missing_required_flag_is_usage_error() {
    let out = bin()
        .args(["train", "--image-a", "a.png", "--out", "c.cst"])
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
}

#[test]
fn too_many_regions_exit_2_with_capacity_reason() {
    let dir = tempfile::tempdir().unwrap();
    // Nine distinct colors on both sides → nine corresponding regions.
    let mask = cyclestyle::image_io::ImageBuffer::from_fn(16, 16, |y, x| {
        let region = ((y / 6) * 3 + x / 6).min(8) as f32;
        [region / 16.0, 0.0, 0.0]
    });
    let ma = dir.path().join("ma.png");
    let mb = dir.path().join("mb.png");
    mask.save_png(&ma, cyclestyle::image_io::PngDepth::Eight)
        .unwrap();
    mask.save_png(&mb, cyclestyle::image_io::PngDepth::Eight)
        .unwrap();
    let img = cyclestyle::image_io::ImageBuffer::from_fn(16, 16, |_, _| [0.5, 0.4, 0.3]);
    let ia = dir.path().join("ia.png");
    let ib = dir.path().join("ib.png");
    img.save_png(&ia, cyclestyle::image_io::PngDepth::Eight)
        .unwrap();
    img.save_png(&ib, cyclestyle::image_io::PngDepth::Eight)
        .unwrap();

    let out = bin()
        .args([
            "train",
            "--image-a",
            ia.to_str().unwrap(),
            "--image-b",
            ib.to_str().unwrap(),
            "--mask-a",
            ma.to_str().unwrap(),
            "--mask-b",
            mb.to_str().unwrap(),
            "--out",
            dir.path().join("c.cst").to_str().unwrap(),
            "--steps",
            "1",
            "--base-channels",
            "4",
        ])
        .output()
        .unwrap();
    assert_eq!(code(&out), 2, "stderr: {}", stderr(&out));
    assert!(
        stderr(&out).contains("capacity: regions>8"),
        "unexpected reason line: {}",
        stderr(&out)
    );
}

#[test]
fn corrupt_checkpoint_is_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cst");
    std::fs::write(&bad, b"not a checkpoint at all").unwrap();
    let fx = fixtures();
    let out = bin()
        .args([
            "retrain",
            "--ckpt",
            bad.to_str().unwrap(),
            "--image-a",
            fx.join("toy2_a.png").to_str().unwrap(),
            "--image-b",
            fx.join("toy2_b.png").to_str().unwrap(),
            "--out",
            dir.path().join("o.cst").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(code(&out), 2, "stderr: {}", stderr(&out));
}

#[test]
fn missing_input_file_is_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args([
            "train",
            "--image-a",
            dir.path().join("nope.png").to_str().unwrap(),
            "--image-b",
            dir.path().join("nope2.png").to_str().unwrap(),
            "--out",
            dir.path().join("c.cst").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(code(&out), 4, "stderr: {}", stderr(&out));
}

#[test]
fn config_file_merges_under_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "steps = 5\nlambda_s = 3.5\nbase_channels = 8\n").unwrap();
    let (_, out) = train_small(
        dir.path(),
        &["--config", cfg.to_str().unwrap(), "--steps", "3"],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let line = stdout(&out)
        .lines()
        .find(|l| l.starts_with("config:"))
        .expect("config line")
        .trim_start_matches("config:")
        .trim()
        .to_string();
    let v: serde_json::Value = serde_json::from_str(&line).unwrap();
    // Flag wins over file; file fills what flags left unset.
    assert_eq!(v["steps"], 3);
    assert_eq!(v["lambda_s"], 3.5);
}

#[test]
fn baseline_writes_image() {
    let dir = tempfile::tempdir().unwrap();
    let fx = fixtures();
    let out_img = dir.path().join("base.png");
    let out = bin()
        .args([
            "baseline",
            "--image-a",
            fx.join("toy_a.png").to_str().unwrap(),
            "--image-b",
            fx.join("toy_b.png").to_str().unwrap(),
            "--out",
            out_img.to_str().unwrap(),
            "--steps",
            "3",
        ])
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(out_img.exists());
}

#[test]
fn seed_determinism_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let (ck1, out1) = train_small(dir.path(), &["--serial"]);
    assert_eq!(code(&out1), 0);
    let bytes1 = std::fs::read(&ck1).unwrap();
    std::fs::remove_file(&ck1).unwrap();
    let (ck2, out2) = train_small(dir.path(), &["--serial"]);
    assert_eq!(code(&out2), 0);
    let bytes2 = std::fs::read(&ck2).unwrap();
    assert_eq!(bytes1, bytes2, "same seed must give identical checkpoints");
}
