use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dico::data::load_image;
use dico::eval::EvalReport;

fn dico(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dico"))
        .args(args)
        .output()
        .expect("spawn dico")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// A 32x32 scene small enough for a few training steps.
fn tiny_scene(dir: &Path) {
    let spec = dir.join("spec.json");
    let text = serde_json::json!({
        "seed": 3, "width": 32, "height": 32, "day_frames": 4, "night_frames": 4,
    });
    fs::write(&spec, text.to_string()).unwrap();
    let scene = dir.join("scene");
    assert_ok(&dico(&[
        "synth-scene",
        "--spec",
        p(&spec),
        "--out-dir",
        p(&scene),
    ]));
}

#[test]
fn help_and_usage_exit_codes() {
    let help = dico(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&help.stdout).contains("translate"));
    assert_eq!(dico(&["train", "--help"]).status.code(), Some(0));

    assert_eq!(dico(&[]).status.code(), Some(1));
    assert_eq!(dico(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(
        dico(&["invariants", "--input", "x.png"]).status.code(),
        Some(1)
    );
}

#[test]
fn runtime_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.png");
    let out = dico(&[
        "invariants",
        "--input",
        p(&missing),
        "--out-dir",
        p(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));

    let config = dir.path().join("bad.json");
    fs::write(&config, r#"{"iterations": 1, "no_such_field": true}"#).unwrap();
    assert_eq!(
        dico(&["train", "--config", p(&config)]).status.code(),
        Some(2)
    );
}

#[test]
fn scene_background_invariants_and_masks() {
    let dir = tempfile::tempdir().unwrap();
    tiny_scene(dir.path());
    let scene = dir.path().join("scene");
    for sub in ["day", "night", "masks", "truth"] {
        assert!(scene.join(sub).is_dir(), "{sub}/ missing");
    }
    assert_eq!(fs::read_dir(scene.join("day")).unwrap().count(), 4);

    let bg = dir.path().join("out/background.png");
    assert_ok(&dico(&[
        "synth-background",
        "--scene-dir",
        p(&scene),
        "--out",
        p(&bg),
    ]));
    assert_eq!(load_image(&bg).unwrap().shape().h(), 32);

    let night = scene.join("night/night_000.png");
    let inv = dir.path().join("inv");
    assert_ok(&dico(&[
        "invariants",
        "--input",
        p(&night),
        "--out-dir",
        p(&inv),
    ]));
    for name in ["E", "W", "C", "H", "N"] {
        let img = load_image(&inv.join(format!("{name}.png"))).unwrap();
        assert_eq!((img.shape().h(), img.shape().w()), (32, 32));
    }

    let masks = dir.path().join("masks");
    assert_ok(&dico(&[
        "disentangle",
        "--input",
        p(&night),
        "--reference",
        p(&bg),
        "--out-dir",
        p(&masks),
    ]));
    for stage in ["stage3", "stage4"] {
        let m = load_image(&masks.join(format!("mask_{stage}.png"))).unwrap();
        assert!(m.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(masks.join(format!("similarity_{stage}.png")).is_file());
    }
}

#[test]
fn train_translate_eval() {
    let dir = tempfile::tempdir().unwrap();
    tiny_scene(dir.path());
    let scene = dir.path().join("scene");
    let run = dir.path().join("run");
    let config = dir.path().join("train.json");
    let text = serde_json::json!({
        "iterations": 3, "image_size": 32, "data_root": scene, "out_dir": run,
    });
    fs::write(&config, text.to_string()).unwrap();
    assert_ok(&dico(&["train", "--config", p(&config), "--quiet"]));
    let ckpt = run.join("checkpoint.bin");
    assert!(ckpt.is_file());
    let csv = fs::read_to_string(run.join("losses.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4, "header plus one row per iteration");

    let one = dir.path().join("day.png");
    let night = scene.join("night/night_001.png");
    assert_ok(&dico(&[
        "translate",
        "--checkpoint",
        p(&ckpt),
        "--input",
        p(&night),
        "--out",
        p(&one),
    ]));
    let img = load_image(&one).unwrap();
    assert_eq!((img.shape().c(), img.shape().h()), (3, 32));

    let all = dir.path().join("translated");
    assert_ok(&dico(&[
        "translate",
        "--checkpoint",
        p(&ckpt),
        "--input",
        p(&scene.join("night")),
        "--out",
        p(&all),
    ]));
    assert_eq!(fs::read_dir(&all).unwrap().count(), 4);

    let report = dir.path().join("report.json");
    let out = dico(&[
        "eval",
        "--checkpoint",
        p(&ckpt),
        "--scene-dir",
        p(&scene),
        "--report",
        p(&report),
    ]);
    assert_ok(&out);
    let parsed: EvalReport = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert!(parsed.frechet_before.is_finite() && parsed.frechet_after.is_finite());
    assert!(parsed.separation_per_stage.contains_key("stage4"));
}
