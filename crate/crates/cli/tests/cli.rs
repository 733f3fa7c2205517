use std::path::Path;
use std::process::{Command, Output};

fn itermask(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_itermask"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &str = r#"
healthy_count = 12
lesion_count = 3
sweep_percentiles = [70.0, 90.0]
oracle_percentiles = [80.0]

[phantom]
height = 32
width = 32
lesion_radius = [3.0, 6.0]

[train]
epochs = 2
batch_size = 4
learning_rate = 0.001
base_channels = 2
depth = 2
radius = 3.0
validation_fraction = 0.25

[refinement]
radius = 3.0
max_iterations = 4
"#;

#[test]
fn missing_config_is_a_usage_error() {
    let o = itermask(&["train"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));

    let o = itermask(&["train", "--config", "/definitely/not/here.toml"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));

    let o = itermask(&["phantom", "--count", "1", "--device", "cuda"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn invalid_config_contents_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[train]\nradius = 3.0\n[refinement]\nradius = 5.0\n").unwrap();
    let o = itermask(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn phantom_writes_one_manifest_entry_per_image() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ph");
    let o = itermask(&["phantom", "--count", "3", "--lesion", "--seed", "4", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    let entries = manifest["entries"].as_array().unwrap();
    assert_eq!(entries.len(), 3);
    assert_eq!(entries[0]["seed"], 4);
    for e in entries {
        assert!(e["lesion_area"].as_u64().unwrap() > 0);
        assert!(out.join(e["image"].as_str().unwrap()).exists());
    }
}

fn run_ok(args: &[&str]) -> Output {
    let o = itermask(args);
    assert!(o.status.success(), "{args:?}: {}", stderr(&o));
    o
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_calibrate_infer_evaluate_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let models = dir.path().join("models");

    run_ok(&["train", "--config", s(&cfg), "--out", s(&models)]);
    for f in ["init.ckpt", "main.ckpt", "main-unguided.ckpt", "calibration.json", "config.toml", "main.log.jsonl"] {
        assert!(models.join(f).exists(), "{f}");
    }
    let persisted = std::fs::read_to_string(models.join("config.toml")).unwrap();
    assert!(persisted.contains("healthy_count = 12"));

    let cal_dir = dir.path().join("cal");
    run_ok(&["calibrate", "--config", s(&cfg), "--models", s(&models), "--out", s(&cal_dir)]);
    let a = std::fs::read_to_string(models.join("calibration.json")).unwrap();
    let b = std::fs::read_to_string(cal_dir.join("calibration.json")).unwrap();
    assert_eq!(a, b, "calibration is reproducible");

    let ph = dir.path().join("ph");
    run_ok(&["phantom", "--config", s(&cfg), "--count", "2", "--lesion", "--out", s(&ph)]);
    let inf = dir.path().join("inf");
    let image = ph.join("phantom_00000.nii.gz");
    run_ok(&["infer", "--models", s(&models), "--input", s(&image), "--out", s(&inf)]);
    assert!(inf.join("segmentation.nii.gz").exists());
    assert!(inf.join("traces/slice_000/manifest.json").exists());
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(inf.join("inference.json")).unwrap()).unwrap();
    assert_eq!(summary["slices"].as_array().unwrap().len(), 1);

    let eval = dir.path().join("eval");
    let o = run_ok(&["evaluate", "--config", s(&cfg), "--models", s(&models), "--data", s(&ph), "--out", s(&eval)]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("DSC"));
    let csv = std::fs::read_to_string(eval.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(eval.join("summary.json").exists());

    let sw = dir.path().join("sweep");
    run_ok(&["sweep", "--config", s(&cfg), "--models", s(&models), "--out", s(&sw)]);
    let csv = std::fs::read_to_string(sw.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);

    // A model trained at another radius does not match this config.
    let other = dir.path().join("other.toml");
    std::fs::write(&other, TINY.replace("radius = 3.0", "radius = 4.0")).unwrap();
    let o = itermask(&["evaluate", "--config", s(&other), "--models", s(&models), "--out", s(&eval)]);
    assert_eq!(o.status.code(), Some(5), "{}", stderr(&o));
}
