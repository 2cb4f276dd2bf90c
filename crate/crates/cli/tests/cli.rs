use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::json;

fn bimu(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bimu")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn synthetic_config(dir: &Path, seed: u64) -> PathBuf {
    let cfg = json!({
        "seed": seed,
        "method": "bimu",
        "network": { "layer_sizes": [4, 8, 3], "activation": "rbg" },
        "bimu": { "n": 300, "alpha_max": 0.054, "beta_l": 14.0, "beta_kl": 0.16,
                  "gamma_grad": 5.8, "k": 2, "temperature": 1.0 },
        "stream": { "kind": "synthetic", "spec": {
            "classes": 3, "dims": 4, "freq": [30, 30, 10], "noise_std": 0.5,
            "test_per_class": 10, "low_freq_threshold": 20 } },
        "policy": { "kind": "fixed", "tau": 0.3, "score": "vr" },
        "k_query": 4,
        "eval": { "k": 2, "checkpoints": 2 },
        "ood": { "source": { "kind": "noise" }, "count": 20 },
        "output_dir": "out",
    });
    let path = dir.join("cfg.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn validate_accepts_shipped_configs() {
    let o = bimu(&["validate", configs().join("synthetic_active.json").to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("ok"));
}

#[test]
fn mem_reports_bimu_preset_size() {
    let o = bimu(&["mem", configs().join("pmnist_bimu.json").to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("317600 bytes"), "{}", stdout(&o));
}

#[test]
fn run_with_missing_dataset_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({
        "seed": 1,
        "method": "bimu",
        "network": { "layer_sizes": [784, 100, 10], "activation": "rbg" },
        "stream": { "kind": "permuted_mnist", "dir": "no_such_dir", "tasks": 2, "samples_per_task": 10 },
        "output_dir": "out",
    });
    let path = dir.path().join("cfg.json");
    fs::write(&path, cfg.to_string()).unwrap();
    let o = bimu(&["run", path.to_str().unwrap()]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.contains("train-images-idx3-ubyte"), "{err}");
    assert!(dir.path().join("out/PARTIAL").is_file());
}

#[test]
fn unknown_flag_and_unreadable_config_fail() {
    let o = bimu(&["run", "--frobnicate", "x.json"]);
    assert!(!o.status.success());
    assert!(stderr(&o).to_lowercase().contains("usage"));

    let o = bimu(&["validate", "/nonexistent/config.json"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("/nonexistent/config.json"));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = synthetic_config(dir.path(), 1);
    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    v["learning_rate"] = json!(0.1);
    fs::write(&path, v.to_string()).unwrap();
    let o = bimu(&["validate", path.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));
}

#[test]
fn run_then_inspect_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synthetic_config(dir.path(), 4);
    let o = bimu(&["run", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = dir.path().join("out");
    let ckpt = out.join("posterior.bimu");
    assert!(ckpt.is_file());

    let o = bimu(&["hist", ckpt.to_str().unwrap(), "--bins", "10"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "bin_lo,bin_hi,count");
    assert_eq!(lines.len(), 11);
    let total: usize = lines[1..].iter().map(|l| l.rsplit(',').next().unwrap().parse::<usize>().unwrap()).sum();
    assert_eq!(total, 4 * 8 + 8 * 3);

    let o = bimu(&["eval-ood", ckpt.to_str().unwrap(), cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    for line in stdout(&o).lines() {
        let auc: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&auc));
    }
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synthetic_config(dir.path(), 1);
    let read = |sub: &str| fs::read_to_string(dir.path().join(sub).join("results.json")).unwrap();
    for (sub, seed) in [("a", None), ("b", Some("1")), ("c", Some("2"))] {
        let out = dir.path().join(sub);
        let mut args = vec!["run", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
        if let Some(s) = seed {
            args.extend(["--seed", s]);
        }
        let o = bimu(&args);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
    assert!(read("c").contains("\"seed\": 2"));
}
