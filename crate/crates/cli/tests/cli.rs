//! Runs the `faultclip` binary against the fixture and small synthetic
//! models.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use faultclip_core::{save_model, LayerKind, LayerParams, LayerSpec, Model, NumericFormat, WordTensor};
use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_faultclip");
const GOLDEN_TUNED: [f64; 3] = [2.1749578, 10.265708, 25.711601];

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn config() -> PathBuf {
    fixtures().join("fixture.toml")
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("spawn faultclip")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(args: &[&str]) -> Output {
    let o = run(args);
    assert_eq!(code(&o), 0, "{args:?}: {}", stderr(&o));
    o
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn missing_model_is_config_error_naming_path() {
    let o = run(&["profile", "--model", "no/such/model.ftc"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("no/such/model.ftc"), "{}", stderr(&o));
}

#[test]
fn empty_calibration_is_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        format!(
            "model = {:?}\n[split]\ncalibration_fraction = 0.0\n",
            s(&fixtures().join("lenet-fixture.ftc"))
        ),
    )
    .unwrap();
    let o = run(&["profile", "-c", s(&cfg), "--out-dir", s(dir.path())]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn bad_flags_and_layers_are_config_errors() {
    let out = tempfile::tempdir().unwrap();
    let o = run(&["sweep", "-c", s(&config()), "--clip", "sometimes"]);
    assert_eq!(code(&o), 2);
    let o = run(&["inject", "-c", s(&config()), "--out-dir", s(out.path()), "--rate", "1e-3", "--layer", "relu1"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let o = run(&["inject", "-c", s(&config()), "--out-dir", s(out.path()), "--rate", "1e-3", "--layer", "99"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let o = run(&["sweep", "-c", s(&config()), "--out-dir", s(out.path()), "--clip", "none", "--rates", "1e-3"]);
    assert_eq!(code(&o), 2, "grid must start at 0: {}", stderr(&o));
}

#[test]
fn profile_matches_golden_file() {
    let out = tempfile::tempdir().unwrap();
    ok(&["profile", "-c", s(&config()), "--out-dir", s(out.path())]);
    let got = std::fs::read_to_string(out.path().join("profile.json")).unwrap();
    let want = std::fs::read_to_string(fixtures().join("golden/profile.json")).unwrap();
    assert_eq!(got, want);
    assert!(out.path().join("run.log").is_file());
}

#[test]
fn single_rate_single_trial_gives_one_row() {
    let out = tempfile::tempdir().unwrap();
    ok(&[
        "sweep", "-c", s(&config()), "--out-dir", s(out.path()), "--clip", "none", "--rates", "0", "--trials", "1",
        "--samples", "200",
    ]);
    let csv = std::fs::read_to_string(out.path().join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert!(lines[0].starts_with("# config_hash="));
    assert!(lines[0].contains(",seed=7,"));
    assert_eq!(lines[1], "rate,trial,accuracy");
    assert_eq!(lines.len(), 3, "{csv}");
    assert!(lines[2].starts_with("0,0,"));
}

#[test]
fn sweep_rerun_is_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        ok(&[
            "sweep", "-c", s(&config()), "--out-dir", s(d.path()), "--clip", "actmax", "--trials", "3", "--samples",
            "300", "--svg",
        ]);
    }
    for f in ["sweep.csv", "sweep.json", "sweep.svg"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert_eq!(x, y, "{f} differs");
    }
    let doc = json(&a.path().join("sweep.json"));
    assert_eq!(doc["schema"], "faultclip.sweep/1");
    assert_eq!(doc["provenance"]["seed"], 7);
    assert_eq!(doc["clip"], "actmax");
    assert_eq!(doc["summary"].as_array().unwrap().len(), 6);
}

#[test]
fn inject_rate_zero_is_baseline_with_empty_mask() {
    let out = tempfile::tempdir().unwrap();
    ok(&["inject", "-c", s(&config()), "--out-dir", s(out.path()), "--rate", "0", "--network", "--emit-mask"]);
    let doc = json(&out.path().join("inject.json"));
    assert_eq!(doc["flips"], 0);
    assert_eq!(doc["accuracy"], doc["baseline_accuracy"]);
    let mask = std::fs::read_to_string(out.path().join("mask.jsonl")).unwrap();
    let lines: Vec<&str> = mask.lines().collect();
    assert_eq!(lines.len(), 1, "header only");
    assert!(lines[0].starts_with("{\"header\":"));
}

#[test]
fn inject_conv1_golden_and_replay() {
    let out = tempfile::tempdir().unwrap();
    let replay = tempfile::tempdir().unwrap();
    ok(&["inject", "-c", s(&config()), "--out-dir", s(out.path()), "--rate", "1e-3", "--layer", "conv1", "--emit-mask"]);
    let doc = json(&out.path().join("inject.json"));
    assert_eq!(doc["flips"], 5);
    assert_eq!(doc["correct"], 1211);
    assert_eq!(doc["total"], 1800);
    assert_eq!(doc["scope"]["layer"], 0);
    let mask = out.path().join("mask.jsonl");
    ok(&["inject", "-c", s(&config()), "--out-dir", s(replay.path()), "--mask-file", s(&mask)]);
    let again = json(&replay.path().join("inject.json"));
    assert_eq!(again["accuracy"], doc["accuracy"]);
    assert_eq!(again["mask_source"], "file");
}

#[test]
fn one_iteration_tune() {
    let out = tempfile::tempdir().unwrap();
    ok(&[
        "tune", "-c", s(&config()), "--out-dir", s(out.path()), "--samples", "200", "--max-iters", "1", "--min-iters",
        "0", "--tune-trials", "2",
    ]);
    let doc = json(&out.path().join("traces.json"));
    for layer in doc["layers"].as_array().unwrap() {
        assert_eq!(layer["iterations"].as_array().unwrap().len(), 1);
        assert_eq!(layer["exit_reason"], "max_iters");
    }
}

fn no_activation_model(path: &Path) {
    let words = |n: usize, shape: Vec<usize>| WordTensor {
        shape,
        words: (0..n as u32).map(|i| (i as f32 * 0.1).to_bits()).collect(),
    };
    let layers = vec![
        LayerSpec::new("flatten", LayerKind::Flatten),
        LayerSpec::new(
            "fc",
            LayerKind::FullyConnected {
                in_features: 16,
                out_features: 10,
            },
        ),
        LayerSpec::new("output", LayerKind::SoftmaxArgmax),
    ];
    let params = vec![
        None,
        Some(LayerParams {
            weight: words(160, vec![10, 16]),
            bias: words(10, vec![10]),
        }),
        None,
    ];
    let m = Model::new("linear", vec![1, 4, 4], 10, NumericFormat::Float32, layers, params).unwrap();
    save_model(&m, path).unwrap();
}

#[test]
fn nothing_to_tune_exits_zero() {
    let out = tempfile::tempdir().unwrap();
    let model = out.path().join("linear.ftc");
    no_activation_model(&model);
    let o = ok(&["tune", "--model", s(&model), "--out-dir", s(out.path()), "--samples", "50"]);
    assert!(stderr(&o).contains("nothing to tune"), "{}", stderr(&o));
    let doc = json(&out.path().join("traces.json"));
    assert!(doc["layers"].as_array().unwrap().is_empty());
}

#[test]
fn fixture_tune_golden_and_tuned_sweep_beats_unclipped() {
    let out = tempfile::tempdir().unwrap();
    ok(&["tune", "-c", s(&config()), "--out-dir", s(out.path())]);
    let doc = json(&out.path().join("traces.json"));
    assert_eq!(doc["schema"], "faultclip.traces/1");
    let got: Vec<f64> = doc["thresholds"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    for (g, w) in got.iter().zip(GOLDEN_TUNED) {
        assert!((g - w).abs() <= 1e-6 * w, "{got:?}");
    }
    let tuned = out.path().join("tuned.ftc");
    let m = faultclip_core::load_model(&tuned).unwrap();
    assert_eq!(m.metadata["seed"], "7");
    assert_eq!(m.metadata["config_hash"], doc["provenance"]["config_hash"].as_str().unwrap());

    let mut auc = Vec::new();
    for clip in ["none", "tuned"] {
        let d = out.path().join(clip);
        ok(&[
            "sweep", "-c", s(&config()), "--out-dir", s(&d), "--clip", clip, "--tuned-model", s(&tuned), "--trials",
            "10",
        ]);
        auc.push(json(&d.join("sweep.json"))["auc"].as_f64().unwrap());
    }
    assert!(auc[1] > auc[0], "tuned {} vs none {}", auc[1], auc[0]);
}
