use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};
use tempfile::TempDir;

const TOY: &str = r#"
method = "gnpe"
[model]
name = "gaussian-toy"
[simulation]
count = 1000
[train]
max_epochs = 15
[sampler]
chains = 2000
"#;

fn gnpe(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gnpe"))
        .args(args)
        .arg("--out")
        .arg(dir.join("out"))
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("config.toml");
    fs::write(&p, text).unwrap();
    p
}

fn run(dir: &Path, cmd: &str, config: &Path, extra: &[&str]) -> Output {
    let mut args = vec![cmd, "--config", config.to_str().unwrap()];
    args.extend_from_slice(extra);
    gnpe(dir, &args)
}

fn digest(path: &Path) -> String {
    hex::encode(Sha256::digest(fs::read(path).unwrap()))
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn simulate_writes_dataset_and_manifest() {
    let t = TempDir::new().unwrap();
    let cfg = write_config(t.path(), TOY);
    let o = run(t.path(), "simulate", &cfg, &["--seed", "3"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = t.path().join("out");
    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(out.join("simulate.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["details"]["records"], 1000);
    assert_eq!(manifest["config"]["seeds"]["simulation"], 3);
    assert_eq!(manifest["outputs"]["dataset.bin"], digest(&out.join("dataset.bin")));
    assert!(out.join("config.toml").exists());
    assert!(out.join("dataset_preview.csv").exists());

    let again = TempDir::new().unwrap();
    let o = run(again.path(), "simulate", &cfg, &["--seed", "3"]);
    assert_eq!(code(&o), 0);
    assert_eq!(digest(&out.join("dataset.bin")), digest(&again.path().join("out/dataset.bin")));
}

#[test]
fn invalid_prior_exits_3() {
    let t = TempDir::new().unwrap();
    let cfg = write_config(t.path(), "[model]\nname = \"oscillator\"\nbeta_prior = [0.6, 0.2]\n");
    let o = run(t.path(), "simulate", &cfg, &[]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("model.beta_prior"), "{}", stderr(&o));
}

#[test]
fn unknown_key_exits_3() {
    let t = TempDir::new().unwrap();
    let cfg = write_config(t.path(), "[train]\nlearning_rate = 0.1\n");
    let o = run(t.path(), "simulate", &cfg, &[]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));
}

#[test]
fn missing_config_exits_2() {
    let t = TempDir::new().unwrap();
    let o = gnpe(t.path(), &["simulate", "--config", "/nonexistent/config.toml"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn train_without_dataset_exits_2() {
    let t = TempDir::new().unwrap();
    let cfg = write_config(t.path(), TOY);
    let o = run(t.path(), "train", &cfg, &[]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("dataset.bin"), "{}", stderr(&o));
}

#[test]
fn zero_workers_exits_3() {
    let t = TempDir::new().unwrap();
    let cfg = write_config(t.path(), TOY);
    assert_eq!(code(&run(t.path(), "simulate", &cfg, &["--workers", "0"])), 3);
}

#[test]
fn toy_pipeline_end_to_end() {
    let t = TempDir::new().unwrap();
    let cfg = write_config(t.path(), TOY);
    for cmd in ["simulate", "train", "infer", "evaluate"] {
        let o = run(t.path(), cmd, &cfg, &["--seed", "5"]);
        assert_eq!(code(&o), 0, "{cmd}: {}", stderr(&o));
        assert!(t.path().join(format!("out/{cmd}.manifest.json")).exists());
    }
    let out = t.path().join("out");
    for f in ["gnpe.q.ckpt", "gnpe.q_init.ckpt", "gnpe.q.loss.csv", "observation.json", "gnpe.samples.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let metrics: serde_json::Value =
        serde_json::from_slice(&fs::read(out.join("gnpe.metrics.json")).unwrap()).unwrap();
    let recs = metrics["metrics"].as_array().unwrap();
    let c2st = recs.iter().find(|r| r["metric"] == "c2st").unwrap()["value"].as_f64().unwrap();
    assert!((0.4..1.0).contains(&c2st), "c2st {c2st}");

    // The evaluate manifest pins the exact samples it scored.
    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(out.join("evaluate.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["inputs"]["gnpe.samples.csv"], digest(&out.join("gnpe.samples.csv")));

    // Every recorded hash matches the file on disk, and every artifact has a producer.
    let mut produced = std::collections::BTreeSet::new();
    for cmd in ["simulate", "train", "infer", "evaluate"] {
        let m: serde_json::Value =
            serde_json::from_slice(&fs::read(out.join(format!("{cmd}.manifest.json"))).unwrap()).unwrap();
        assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
        for side in ["inputs", "outputs"] {
            for (name, hash) in m[side].as_object().unwrap() {
                assert_eq!(hash, &digest(&out.join(name)), "{cmd} {side} {name}");
                if side == "outputs" {
                    produced.insert(name.clone());
                }
            }
        }
    }
    for entry in fs::read_dir(&out).unwrap() {
        let name = entry.unwrap().file_name().into_string().unwrap();
        if !name.ends_with(".manifest.json") && name != "config.toml" {
            assert!(produced.contains(&name), "{name} has no producer");
        }
    }
}

#[test]
fn results_do_not_depend_on_workers() {
    // Same directory both times: the output path is part of the echoed config.
    let t = TempDir::new().unwrap();
    let cfg = write_config(t.path(), TOY);
    let out = t.path().join("out");
    let mut hashes = Vec::new();
    for workers in ["1", "2"] {
        let _ = fs::remove_dir_all(&out);
        for cmd in ["simulate", "train", "infer"] {
            let o = run(t.path(), cmd, &cfg, &["--workers", workers]);
            assert_eq!(code(&o), 0, "{cmd}: {}", stderr(&o));
        }
        hashes.push((digest(&out.join("gnpe.q.ckpt")), digest(&out.join("gnpe.samples.csv"))));
    }
    assert_eq!(hashes[0], hashes[1]);
}

#[test]
fn retraining_reproduces_checkpoint() {
    let t = TempDir::new().unwrap();
    let cfg = write_config(t.path(), &TOY.replace("method = \"gnpe\"", "method = \"npe\""));
    assert_eq!(code(&run(t.path(), "simulate", &cfg, &[])), 0);
    assert_eq!(code(&run(t.path(), "train", &cfg, &[])), 0);
    let first = digest(&t.path().join("out/npe.q.ckpt"));
    assert_eq!(code(&run(t.path(), "train", &cfg, &[])), 0);
    assert_eq!(first, digest(&t.path().join("out/npe.q.ckpt")));
}

#[test]
fn diverging_training_exits_4() {
    let t = TempDir::new().unwrap();
    let cfg = write_config(
        t.path(),
        &TOY.replace("method = \"gnpe\"", "method = \"npe\"").replace("[train]", "[train]\nadam.lr = 1e300"),
    );
    assert_eq!(code(&run(t.path(), "simulate", &cfg, &[])), 0);
    let o = run(t.path(), "train", &cfg, &[]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
}

#[test]
fn unconverged_sampler_exits_5_after_writing() {
    let t = TempDir::new().unwrap();
    let text = format!("{TOY}[sampler.policy]\nkind = \"converge-js\"\nthreshold = 1e-12\nmax_iterations = 3\n");
    let cfg = write_config(t.path(), &text);
    for cmd in ["simulate", "train"] {
        assert_eq!(code(&run(t.path(), cmd, &cfg, &[])), 0);
    }
    let o = run(t.path(), "infer", &cfg, &[]);
    assert_eq!(code(&o), 5, "{}", stderr(&o));
    let out = t.path().join("out");
    assert!(out.join("gnpe.samples.csv").exists());
    let diag: serde_json::Value =
        serde_json::from_slice(&fs::read(out.join("gnpe.diagnostics.json")).unwrap()).unwrap();
    assert_eq!(diag["converged"], false);
}

#[test]
fn npe_cnn_checkpoint_uses_conv_embedding() {
    let t = TempDir::new().unwrap();
    let cfg = write_config(
        t.path(),
        "method = \"npe-cnn\"\n[simulation]\ncount = 300\n[train]\nmax_epochs = 1\n",
    );
    assert_eq!(code(&run(t.path(), "simulate", &cfg, &[])), 0);
    let o = run(t.path(), "train", &cfg, &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ckpt = fs::read(t.path().join("out/npe-cnn.q.ckpt")).unwrap();
    let text = String::from_utf8_lossy(&ckpt);
    assert!(text.contains("conv"), "checkpoint lacks a conv embedding");
}

#[test]
fn reproduce_appb_writes_histogram() {
    let t = TempDir::new().unwrap();
    let cfg = write_config(t.path(), "[sampler]\nchains = 4000\n");
    let o = run(t.path(), "reproduce", &cfg, &["appb"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(t.path().join("out/appb.csv")).unwrap();
    assert!(csv.starts_with("center,gnpe_density,analytic_density"));
    assert!(t.path().join("out/reproduce-appb.manifest.json").exists());
}
