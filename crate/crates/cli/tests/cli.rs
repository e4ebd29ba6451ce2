use std::path::Path;
use std::process::{Command, Output};

fn acr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_acr"))
        .args(args)
        .env("ACR_LOG", "error")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> serde_json::Value {
    let out = acr(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("JSON on stdout")
}

const TINY: &str = r#"
epochs = 2
batch_size = 4
seed = 3
augmentations = ["flip_h", "rot90"]

[vit]
patch_size = 4
grid = { h = 8, w = 8 }
channels = 3
embed_dim = 8
num_layers = 2
num_heads = 2
mlp_ratio = 2
num_classes = 5
use_positional_embedding = true
"#;

fn setup(dir: &Path) -> (String, String) {
    let data = dir.join("data");
    let cfg = dir.join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    ok(&["gen-data", "--out", data.to_str().unwrap(), "--samples", "6", "--seed", "4"]);
    (cfg.to_str().unwrap().to_string(), data.to_str().unwrap().to_string())
}

#[test]
fn training_twice_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = setup(dir.path());
    let a = dir.path().join("run_a");
    let b = dir.path().join("run_b");
    for out in [&a, &b] {
        ok(&["train", "--config", &cfg, "--data", &data, "--out", out.to_str().unwrap()]);
    }
    for file in ["metrics.jsonl", "model.ckpt", "config.toml"] {
        let x = std::fs::read(a.join(file)).unwrap();
        let y = std::fs::read(b.join(file)).unwrap();
        assert!(!x.is_empty());
        assert_eq!(x, y, "{file} differs");
    }
    assert_eq!(std::fs::read_to_string(a.join("metrics.jsonl")).unwrap().lines().count(), 2);
}

#[test]
fn train_eval_and_seeds_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = setup(dir.path());
    let run = dir.path().join("run");
    let run_s = run.to_str().unwrap();
    let t = ok(&[
        "train", "--config", &cfg, "--data", &data, "--out", run_s, "--alpha", "0", "--beta", "0",
        "--distance", "l2", "--aug", "flip_v,rot180", "--epochs", "1",
    ]);
    assert_eq!(t["final"]["epoch"], 0);
    let saved = std::fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(saved.contains("distance = \"l2\""));
    assert!(saved.contains("\"flip_v\""));

    let ckpt = run.join("model.ckpt");
    let ckpt_s = ckpt.to_str().unwrap();
    let e = ok(&["eval", "--checkpoint", ckpt_s, "--data", &data, "--refined", "off", "--layers", "0..2"]);
    assert_eq!(e["refined"], false);
    assert_eq!(e["layers"], "0..2");
    assert_eq!(e["num_images"], 6);
    assert_eq!(e["layer_sweep"].as_array().unwrap().len(), 2);
    assert!(e["miou"].as_f64().unwrap() >= 0.0);

    let seeds = dir.path().join("seeds");
    let image = Path::new(&data).join("images/00000.ppm");
    let s = ok(&[
        "seeds", "--checkpoint", ckpt_s, "--image", image.to_str().unwrap(), "--class", "2", "--out",
        seeds.to_str().unwrap(), "--attention-csv",
    ]);
    assert_eq!(s["class"], 2);
    for f in ["class2_refined.pgm", "class2_unrefined.json", "class2_refined_seed.pgm", "attention_layer1.csv"] {
        assert!(seeds.join(f).exists(), "{f} missing");
    }
    let side: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(seeds.join("class2_refined.json")).unwrap()).unwrap();
    assert_eq!(side["refined"], true);
    assert_eq!(side["layers_fused"], "0..2");
}

#[test]
fn inversion_check_reports_agreement() {
    let r = ok(&["check-inversion", "--grid", "3x5", "--transform", "rot90", "--oracle", "--trials", "5"]);
    assert_eq!(r["passed"], true);
    assert!(r["oracle_difference"].as_f64().unwrap() <= 1e-12);
    let out = acr(&["--pretty", "check-inversion", "--grid", "2x2", "--transform", "flip_h"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("PASS"));
}

#[test]
fn grad_check_passes_on_a_tiny_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let r = ok(&["grad-check", "--config", cfg.to_str().unwrap(), "--max-coords", "2"]);
    assert_eq!(r["passed"], true);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "epochs = 0\n").unwrap();
    let out = acr(&["train", "--config", bad.to_str().unwrap(), "--data", "x", "--out", "y"]);
    assert_eq!(out.status.code(), Some(1));
    let out = acr(&["check-inversion", "--grid", "0x3", "--transform", "flip_h"]);
    assert_eq!(out.status.code(), Some(1));
    let out = acr(&["check-inversion", "--grid", "2x2", "--transform", "resize:3x3"]);
    assert_eq!(out.status.code(), Some(1));
    let out = acr(&["no-such-command"]);
    assert_eq!(out.status.code(), Some(1));
    let out = acr(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("Exit codes"));
    // A tolerance no check can meet is a numerical failure.
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let out = acr(&["grad-check", "--config", cfg.to_str().unwrap(), "--max-coords", "1", "--tolerance", "0"]);
    assert_eq!(out.status.code(), Some(2));
}
