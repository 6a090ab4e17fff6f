use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use morphreg_core::network::{ModelConfig, Variant};
use morphreg_core::trainer::{save_model, TrainConfig};
use morphreg_core::volume::{
    read_volume, write_field, write_landmarks, write_mask, write_volume, DisplacementField, LabelMask, Landmark,
    LandmarkSet, Volume,
};
use serde_json::Value;

fn morphreg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_morphreg")).args(args).output().expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        input_dims: [32; 3],
        embed_dim: 8,
        depths: [1, 1, 1, 1],
        heads: [2, 2, 2, 2],
        oab_heads: 2,
        ..ModelConfig::variant(Variant::S)
    }
}

fn smooth(n: usize, phase: f32) -> Volume {
    Volume::from_fn([n; 3], [1.0; 3], |x, y, z| {
        (x as f32 * 0.3 + phase).sin() * (y as f32 * 0.2).cos() + (z as f32 * 0.1).sin() + 2.0
    })
    .unwrap()
}

#[test]
fn missing_flags_print_usage_and_fail() {
    let out = morphreg(&["register", "--moving", "m"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("Usage"), "{err}");
    assert!(out.stdout.is_empty());
    assert!(!morphreg(&["no-such-command"]).status.success());
}

#[test]
fn file_errors_name_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent_field");
    let out = morphreg(&["plot", "--field", path(&missing), "--slice", "0", "--out", path(&dir.path().join("img"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent_field"));
}

#[test]
fn plot_of_zero_field_is_mid_gray() {
    let dir = tempfile::tempdir().unwrap();
    let field = dir.path().join("zero");
    write_field(&DisplacementField::zeros([6, 5, 4], [1.0; 3]).unwrap(), &field).unwrap();
    let out = dir.path().join("plots/slice");
    let status = morphreg(&["plot", "--field", path(&field), "--axis", "z", "--slice", "2", "--out", path(&out)]);
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    let ppm = fs::read(dir.path().join("plots/slice.ppm")).unwrap();
    let head = b"P6\n6 5\n255\n";
    assert_eq!(&ppm[..head.len()], head);
    assert_eq!(ppm.len(), head.len() + 6 * 5 * 3);
    assert!(ppm[head.len()..].iter().all(|&b| b == 128));
    let pgm = fs::read(dir.path().join("plots/slice_jacobian.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n6 5\n255\n"));
}

#[test]
fn eval_identical_masks_and_landmarks() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    let vol = smooth(12, 0.0);
    write_volume(&vol, p("fixed")).unwrap();
    write_volume(&vol, p("warped")).unwrap();
    write_field(&DisplacementField::zeros([12; 3], [1.0; 3]).unwrap(), p("field")).unwrap();
    let mask = LabelMask::from_fn([12; 3], [1.0; 3], |x, y, _| (x > 3) as u8 + (y > 6) as u8).unwrap();
    write_mask(&mask, p("mask")).unwrap();
    let lms = LandmarkSet::new(vec![
        Landmark { name: "a".into(), position: [2.0, 3.0, 4.0] },
        Landmark { name: "b".into(), position: [7.5, 1.0, 9.0] },
    ])
    .unwrap();
    write_landmarks(&lms, p("lm.csv")).unwrap();
    let out = morphreg(&[
        "eval",
        "--fixed", path(&p("fixed")),
        "--warped", path(&p("warped")),
        "--field", path(&p("field")),
        "--fixed-mask", path(&p("mask")),
        "--warped-mask", path(&p("mask")),
        "--landmarks-fixed", path(&p("lm.csv")),
        "--landmarks-moving", path(&p("lm.csv")),
        "--out", path(&p("report.json")),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out.stdout.is_empty());
    let report: Value = serde_json::from_str(&fs::read_to_string(p("report.json")).unwrap()).unwrap();
    assert_eq!(report["dsc_mean"], 1.0);
    assert_eq!(report["dsc"]["1"], 1.0);
    assert_eq!(report["hd95_mean"], 0.0);
    assert_eq!(report["fold_pct"], 0.0);
    assert_eq!(report["tre_mean"], 0.0);
    assert!((report["sim_lncc"].as_f64().unwrap() - 1.0).abs() < 1e-3);
}

#[test]
fn eval_mask_flags_come_in_pairs() {
    let out = morphreg(&["eval", "--fixed", "f", "--warped", "w", "--field", "u", "--fixed-mask", "m"]);
    assert!(!out.status.success());
}

#[test]
fn register_with_zero_head_returns_moving() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    let model = morphreg_core::network::Model::new(tiny_model(), 3).unwrap();
    save_model(p("model.json"), &model, Value::Null).unwrap();
    let moving = smooth(32, 0.4);
    write_volume(&moving, p("moving")).unwrap();
    write_volume(&smooth(32, 1.1), p("fixed")).unwrap();
    let out = morphreg(&[
        "register",
        "--ckpt", path(&p("model.json")),
        "--moving", path(&p("moving")),
        "--fixed", path(&p("fixed")),
        "--out-field", path(&p("u")),
        "--out-warped", path(&p("w")),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let warped = read_volume(p("w")).unwrap();
    assert!(warped.data().iter().zip(moving.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn synth_then_train_writes_trace_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    let spec = serde_json::json!({ "dims": [32, 32, 32], "n_subjects": 2, "radius_range": [4.0, 6.0], "amplitude": 1.5 });
    fs::write(p("spec.json"), spec.to_string()).unwrap();
    let gen = |out: &str| morphreg(&["gen-synth", "--spec", path(&p("spec.json")), "--out", path(&p(out)), "--seed", "4"]);
    assert!(gen("data").status.success());
    assert!(gen("again").status.success());
    for part in ["image", "mask", "field"] {
        let name = format!("subject_001_{part}.raw");
        assert_eq!(fs::read(p("data").join(&name)).unwrap(), fs::read(p("again").join(&name)).unwrap());
    }

    let cfg = TrainConfig { model: tiny_model(), max_iterations: 3, checkpoint_every: 2, ..TrainConfig::default() };
    fs::write(p("train.json"), serde_json::to_string(&cfg).unwrap()).unwrap();
    let out = morphreg(&[
        "train",
        "--config", path(&p("train.json")),
        "--data", path(&p("data")),
        "--out", path(&p("ckpt")),
        "--iterations", "2",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(p("ckpt/loss.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "iteration,total,sim,smooth,seg");
    assert_eq!(lines.len(), 3);
    assert!(p("ckpt/ckpt_000002.json").exists());
    assert!(p("ckpt/final.json").exists());
    let saved: Value = serde_json::from_str(&fs::read_to_string(p("ckpt/config.json")).unwrap()).unwrap();
    assert_eq!(saved["max_iterations"], 2);
}

#[test]
fn train_rejects_invalid_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let out = morphreg(&["train", "--data", path(dir.path()), "--out", path(&dir.path().join("o")), "--lr=-1"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning"));
}

#[test]
fn gradcheck_status_matches_its_report() {
    let out = morphreg(&["gradcheck", "--seed", "0"]);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("cases passed"), "{err}");
    assert_eq!(out.status.success(), !err.contains("FAIL"), "{err}");
}

#[test]
fn repeated_runs_write_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    let spec = serde_json::json!({ "dims": [32, 32, 32], "n_subjects": 2, "radius_range": [4.0, 6.0] });
    fs::write(p("spec.json"), spec.to_string()).unwrap();
    assert!(morphreg(&["gen-synth", "--spec", path(&p("spec.json")), "--out", path(&p("data")), "--seed", "2"]).status.success());
    let cfg = TrainConfig { model: tiny_model(), ..TrainConfig::default() };
    fs::write(p("train.json"), serde_json::to_string(&cfg).unwrap()).unwrap();
    for run in ["a", "b"] {
        let out = morphreg(&[
            "train",
            "--config", path(&p("train.json")),
            "--data", path(&p("data")),
            "--out", path(&p(run)),
            "--iterations", "2",
            "--seed", "5",
            "--lr", "0.001",
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let register = morphreg(&[
            "register",
            "--ckpt", path(&p(run).join("final.json")),
            "--moving", path(&p("data/subject_000_image")),
            "--fixed", path(&p("data/subject_001_image")),
            "--out-field", path(&p(run).join("u")),
            "--out-warped", path(&p(run).join("w")),
        ]);
        assert!(register.status.success(), "{}", String::from_utf8_lossy(&register.stderr));
        let eval = morphreg(&[
            "eval",
            "--fixed", path(&p("data/subject_001_image")),
            "--warped", path(&p(run).join("w")),
            "--field", path(&p(run).join("u")),
            "--out", path(&p(run).join("report.json")),
        ]);
        assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
    }
    for file in ["loss.csv", "final.json", "final.raw", "u.raw", "w.raw", "report.json"] {
        assert_eq!(fs::read(p("a").join(file)).unwrap(), fs::read(p("b").join(file)).unwrap(), "{file}");
    }
}
