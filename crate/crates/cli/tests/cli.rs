use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn cimsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cimsim"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Writes a small MNIST-format dataset of 6x6 images: each class lights a
/// different row or column, plus pixel noise.
fn write_idx(dir: &Path, prefix: &str, n: usize, seed: u32) {
    let (h, w) = (6usize, 6usize);
    let mut state = seed.wrapping_mul(2_654_435_761).max(1);
    let mut next = || {
        state ^= state << 13;
        state ^= state >> 17;
        state ^= state << 5;
        state
    };
    let mut images = Vec::new();
    images.extend(0x0803u32.to_be_bytes());
    images.extend((n as u32).to_be_bytes());
    images.extend((h as u32).to_be_bytes());
    images.extend((w as u32).to_be_bytes());
    let mut labels = Vec::new();
    labels.extend(0x0801u32.to_be_bytes());
    labels.extend((n as u32).to_be_bytes());
    for i in 0..n {
        let c = i % 10;
        labels.push(c as u8);
        for k in 0..h * w {
            let (y, x) = (k / w, k % w);
            let on = if c < 6 { y == c } else { x == c - 6 };
            let noise = (next() % 60) as u8;
            images.push(if on { 195 + noise } else { noise });
        }
    }
    std::fs::write(dir.join(format!("{prefix}-images-idx3-ubyte")), images).unwrap();
    std::fs::write(dir.join(format!("{prefix}-labels-idx1-ubyte")), labels).unwrap();
}

fn dataset(dir: &Path) {
    write_idx(dir, "train", 200, 1);
    write_idx(dir, "t10k", 100, 2);
}

fn small_config(bits: u32) -> Value {
    json!({
        "name": "small",
        "seed": 5,
        "dataset": { "name": "mnist" },
        "network": {
            "input": [1, 6, 6],
            "layers": [
                { "kind": "dense", "units": 16 },
                { "kind": "batchnorm" },
                { "kind": "activation", "function": "relu" },
                { "kind": "dense", "units": 10 },
                { "kind": "activation", "function": "softmax" }
            ]
        },
        "device": { "preset": "rram-ni-hfo2-tin" },
        "crossbar": { "bit_precision": bits, "tile_rows": 8 },
        "c2c": { "distribution": "normal", "mu": 0.0, "sigma": 0.02 },
        "d2d": { "distribution": "normal", "mu": 0.0, "sigma": 0.02 },
        "train": { "epochs": 3, "batch_size": 20, "learning_rate": 0.01 }
    })
}

fn write_config(dir: &Path, name: &str, v: &Value) -> String {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p.display().to_string()
}

#[test]
fn metrics_do_not_depend_on_thread_count() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("mnist");
    std::fs::create_dir(&data).unwrap();
    dataset(&data);
    let cfg = write_config(tmp.path(), "c.json", &small_config(4));
    let run = |jobs: &str| {
        let out = tmp.path().join(format!("run-{jobs}"));
        let o = cimsim(&[
            "train",
            "--config",
            &cfg,
            "--jobs",
            jobs,
            "--no-timing",
            "--mnist-dir",
            data.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "jobs {jobs}: {}", stderr(&o));
        out
    };
    let (a, b) = (run("1"), run("4"));
    let ma = std::fs::read_to_string(a.join("metrics.csv")).unwrap();
    let mb = std::fs::read_to_string(b.join("metrics.csv")).unwrap();
    assert!(ma.starts_with("epoch,train_loss,train_acc,test_acc,seconds\n"));
    assert_eq!(ma.lines().count(), 4);
    assert_eq!(ma, mb);
    assert_eq!(std::fs::read(a.join("model.cimf")).unwrap().len(), std::fs::read(b.join("model.cimf")).unwrap().len());
    let s: Value = serde_json::from_str(&std::fs::read_to_string(a.join("summary.json")).unwrap()).unwrap();
    assert!(s["final_test_acc"].as_f64().unwrap() > 0.5);

    // The saved model evaluates in a separate process.
    let mut icfg = small_config(4);
    icfg["infer"] = json!({ "model": a.join("model.cimf"), "repeats": 2 });
    let icfg = write_config(tmp.path(), "i.json", &icfg);
    let out = tmp.path().join("infer");
    let o = cimsim(&["infer", "--config", &icfg, "--mnist-dir", data.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let s: Value = serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(s["test_accs"].as_array().unwrap().len(), 2);
}

#[test]
fn sweep_writes_one_row_per_value() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("mnist");
    std::fs::create_dir(&data).unwrap();
    dataset(&data);
    let mut v = small_config(2);
    v["train"]["epochs"] = json!(1);
    v["sweep"] = json!({ "axis": "crossbar.bit_precision", "values": [1, 3] });
    let cfg = write_config(tmp.path(), "s.json", &v);
    let out = tmp.path().join("sweep");
    let o = cimsim(&["sweep", "--config", &cfg, "--mnist-dir", data.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    let lines: Vec<_> = csv.lines().collect();
    assert_eq!(lines[0], "value,final_test_acc");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("1,") && lines[2].starts_with("3,"));
    assert!(out.join("point-001/metrics.csv").is_file());
}

#[test]
fn zero_bit_precision_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &small_config(0));
    let o = cimsim(&["validate-config", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("crossbar.bit_precision"), "{}", stderr(&o));
}

#[test]
fn every_unknown_key_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let mut v = small_config(4);
    v["learning_rate"] = json!(0.1);
    v["crossbar"]["bits"] = json!(4);
    v["train"]["optimiser"] = json!("sgd");
    let cfg = write_config(tmp.path(), "c.json", &v);
    let o = cimsim(&["train", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    for key in ["learning_rate", "crossbar.bits", "train.optimiser"] {
        assert!(err.contains(key), "{key} missing from: {err}");
    }
}

#[test]
fn shipped_configs_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    let mut n = 0;
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        let o = cimsim(&["validate-config", "--config", p.to_str().unwrap()]);
        assert!(o.status.success(), "{}: {}", p.display(), stderr(&o));
        n += 1;
    }
    assert!(n >= 8);
}

#[test]
fn missing_inputs_are_data_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("mnist");
    std::fs::create_dir(&data).unwrap();
    dataset(&data);
    let mut v = small_config(4);
    v["infer"] = json!({ "model": tmp.path().join("absent.cimf") });
    let cfg = write_config(tmp.path(), "c.json", &v);
    let out = tmp.path().join("o");
    let o = cimsim(&["infer", "--config", &cfg, "--mnist-dir", data.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("absent.cimf"));

    let o = cimsim(&["train", "--config", &cfg, "--mnist-dir", tmp.path().join("nowhere").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));

    std::fs::write(tmp.path().join("junk.cimf"), b"CIMF\x01\0\0\0garbage").unwrap();
    v["infer"] = json!({ "model": tmp.path().join("junk.cimf") });
    let cfg = write_config(tmp.path(), "c.json", &v);
    let o = cimsim(&["infer", "--config", &cfg, "--mnist-dir", data.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("byte offset"), "{}", stderr(&o));
}
