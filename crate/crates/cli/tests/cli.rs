//! Black-box tests of the `cvf` binary: determinism, pipeline plumbing, and
//! error exit codes.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn desk_conf() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../config/desk.conf")
}

fn cvf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cvf"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_ok(args: &[&str]) {
    let out = cvf(args);
    assert!(
        out.status.success(),
        "cvf {:?} failed:\n{}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap_or_else(|e| panic!("reading {name}: {e}"))
}

#[test]
fn same_seed_gives_byte_identical_outputs() {
    let conf = desk_conf();
    let conf = conf.to_str().unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [a.path(), b.path()] {
        let out = dir.to_str().unwrap();
        run_ok(&["synth-gen", "--config", conf, "--seed", "11", "--out", out]);
        run_ok(&["voxelize", "--config", conf, "--seed", "11", "--out", out]);
        run_ok(&["fuse", "--config", conf, "--seed", "11", "--out", out]);
        run_ok(&[
            "train-toy", "--config", conf, "--seed", "11", "--out", out, "--steps", "5",
        ]);
    }
    for name in [
        "velodyne.bin",
        "calib.txt",
        "labels.txt",
        "camera.pgm",
        "occupancy.pgm",
        "voxelize.txt",
        "joint.pgm",
        "cam_attention.pgm",
        "params.ckpt",
        "train_log.txt",
    ] {
        assert_eq!(read(a.path(), name), read(b.path(), name), "{name} differs across runs");
    }
}

#[test]
fn different_seeds_differ() {
    let conf = desk_conf();
    let conf = conf.to_str().unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_ok(&["synth-gen", "--config", conf, "--seed", "1", "--out", a.path().to_str().unwrap()]);
    run_ok(&["synth-gen", "--config", conf, "--seed", "2", "--out", b.path().to_str().unwrap()]);
    assert_ne!(read(a.path(), "velodyne.bin"), read(b.path(), "velodyne.bin"));
}

#[test]
fn train_detect_eval_pipeline() {
    let conf = desk_conf();
    let conf = conf.to_str().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    run_ok(&[
        "train-toy", "--config", conf, "--seed", "4", "--out", out, "--steps", "60", "--lr",
        "0.02",
    ]);
    let ckpt = dir.path().join("params.ckpt");
    let ckpt = ckpt.to_str().unwrap();
    run_ok(&[
        "detect", "--config", conf, "--seed", "4", "--out", out, "--params", ckpt,
    ]);
    run_ok(&[
        "eval", "--config", conf, "--seed", "4", "--out", out, "--params", ckpt, "--iou", "0.5",
        "--bins",
    ]);
    let eval = String::from_utf8(read(dir.path(), "eval.txt")).unwrap();
    assert!(eval.contains("iou_threshold 0.5"));
    assert!(eval.contains("ap "));
    assert!(eval.contains("bin 0-20m"));
    // detections parse back as KITTI labels (score column tolerated)
    let dets = String::from_utf8(read(dir.path(), "detections.txt")).unwrap();
    for line in dets.lines() {
        assert!(line.split_whitespace().count() >= 16, "short row: {line}");
    }
}

#[test]
fn trained_offsets_change_the_projected_map() {
    let conf = desk_conf();
    let conf = conf.to_str().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    run_ok(&["project-bev", "--config", conf, "--seed", "4", "--out", out]);
    let before = read(dir.path(), "camera_bev.pgm");
    run_ok(&[
        "train-toy", "--config", conf, "--seed", "4", "--out", out, "--steps", "60", "--lr",
        "0.02",
    ]);
    let ckpt = dir.path().join("params.ckpt");
    run_ok(&[
        "project-bev", "--config", conf, "--seed", "4", "--out", out, "--params",
        ckpt.to_str().unwrap(),
    ]);
    let after = read(dir.path(), "camera_bev.pgm");
    assert_ne!(before, after, "training left the projected camera BEV untouched");
}

#[test]
fn bad_inputs_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();

    // missing config file
    let r = cvf(&["synth-gen", "--config", "/nonexistent.conf", "--out", out]);
    assert!(!r.status.success());

    // unknown key in config
    let bad = dir.path().join("bad.conf");
    std::fs::write(&bad, "voxel.sixe_x=0.4\n").unwrap();
    let r = cvf(&["voxelize", "--config", bad.to_str().unwrap(), "--out", out]);
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("line 1"));

    // invalid IoU threshold
    let conf = desk_conf();
    let r = cvf(&[
        "eval", "--config", conf.to_str().unwrap(), "--seed", "4", "--out", out, "--iou", "0",
    ]);
    assert!(!r.status.success());
}
