//! Exit codes and end-to-end runs of the `voxtrack` binary.

use std::path::Path;
use std::process::{Command, Output};

fn voxtrack(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_voxtrack")).current_dir(dir).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &str = "\
# small network for fast runs
backbone.channels=8
backbone.stage_channels=4,4,8,8
backbone.groups=2
dmc.num_samples=2
dmc.num_blocks=1
dmc.fourier_bands=2
decoder.channels=8,4,4,4
decoder.groups=2
synth.num_samples=2
train.epochs=1
train.batch=2
";

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let none = voxtrack(dir.path(), &[]);
    assert_eq!(code(&none), 2);
    assert!(stderr(&none).contains("Usage"));
    assert_eq!(code(&voxtrack(dir.path(), &["frobnicate"])), 2);
    assert_eq!(code(&voxtrack(dir.path(), &["eval", "--no-such-flag"])), 2);
    assert_eq!(code(&voxtrack(dir.path(), &["--help"])), 0);
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["gen-data", "synth.num_samples=many"][..],
        &["gen-data", "no.such.key=1"],
        &["gen-data", "not-a-pair"],
        &["gen-data", "--config", "missing.cfg"],
    ] {
        let o = voxtrack(dir.path(), args);
        assert_eq!(code(&o), 2, "{args:?}: {}", stderr(&o));
    }
    std::fs::write(dir.path().join("dup.cfg"), "train.lr=1\ntrain.lr=2\n").unwrap();
    assert_eq!(code(&voxtrack(dir.path(), &["eval", "--config", "dup.cfg"])), 2);
}

#[test]
fn eval_without_checkpoint_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = voxtrack(dir.path(), &["eval", "train.checkpoint=nowhere/model.ckpt"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("nowhere/model.ckpt"), "{}", stderr(&o));
}

#[test]
fn gen_train_eval_infer_export() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("tiny.cfg"), TINY).unwrap();
    let run = |args: &[&str]| {
        let o = voxtrack(d, args);
        assert_eq!(code(&o), 0, "{args:?}: {}", stderr(&o));
        String::from_utf8(o.stdout).unwrap()
    };
    run(&["gen-data", "--config", "tiny.cfg"]);
    assert!(d.join("data/train/manifest.tsv").exists());
    assert!(d.join("data/train/sample_1/flow.odtf").exists());

    run(&["train-detect", "--config", "tiny.cfg"]);
    assert!(d.join("model.ckpt").exists());

    let cold = voxtrack(d, &["train-joint", "--config", "tiny.cfg", "train.checkpoint=joint.ckpt"]);
    assert_eq!(code(&cold), 2, "{}", stderr(&cold));
    run(&["train-joint", "--config", "tiny.cfg", "train.init=model.ckpt", "train.checkpoint=joint.ckpt"]);

    let report = run(&["eval", "--config", "tiny.cfg"]);
    assert!(report.contains("iou_pct.level4.range8="), "{report}");
    let csv = std::fs::read_to_string(d.join("eval/metrics.csv")).unwrap();
    assert!(csv.starts_with("split,level,range_m,iou_pct,cd_m,epe_m,fg_epe_m"));

    // a checkpoint from a different architecture needs the override
    let other = voxtrack(d, &["eval", "--config", "tiny.cfg", "decoder.head_bias=-3"]);
    assert_eq!(code(&other), 2, "{}", stderr(&other));
    run(&["eval", "--config", "tiny.cfg", "decoder.head_bias=-3", "--ignore-fingerprint"]);

    run(&["infer", "--config", "tiny.cfg", "infer.input=data/train/sample_0", "infer.out=pred"]);
    assert!(d.join("pred/occ_t.level4.odtv").exists() && d.join("pred/flow.odtf").exists());
    run(&["export-viz", "--config", "tiny.cfg", "viz.input=pred", "viz.out=viz"]);
    assert!(d.join("viz/occ_t.level1.txt").exists() && d.join("viz/flow.txt").exists());
}
