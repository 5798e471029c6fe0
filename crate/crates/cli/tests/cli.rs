//! End-to-end runs of the `alore` binary on a tiny model.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn alore(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_alore"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const TINY: &str = r#"{
  "model": {"image_size": 8, "patch_size": 4, "channels": 3, "d": 16, "depth": 2,
            "heads": 2, "mlp_ratio": 2, "classes": 4},
  "alore": {"n": 4, "r": 2, "sites": ["PreMHSA", "PostMHSA", "PreFFN", "PostFFN"]},
  "train": {"epochs": 2, "warmup_epochs": 1, "batch_size": 16, "lr": 0.01,
            "grid": {"lr": [0.01, 0.005], "weight_decay": [0.0], "dropout": [0.0]}},
  "data": {"classes": 4, "image_size": 8, "split_per_class": [12, 4, 4]},
  "seed": 5
}"#;

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("config.json");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn params_prints_counts() {
    let out = alore(&[
        "params", "--method", "alore", "--d", "768", "--r", "4", "--L", "12", "--n", "4",
    ]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("147520") && text.contains("0.15"), "{text}");

    let out = alore(&["params", "--method", "vpt-deep", "--d", "768", "--L", "12", "--m", "10"]);
    let text = stdout(&out);
    assert!(text.contains("92160"), "{text}");
}

#[test]
fn params_rejects_variant_flags_for_other_methods() {
    let out = alore(&["params", "--method", "lora", "--d", "8", "--L", "1", "--sites", "1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_config_exits_2_with_field_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &TINY.replace("\"lr\": 0.01,", "\"lr\": \"fast\","));
    let out = alore(&[
        "train",
        "--config",
        &cfg,
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("train.lr"), "{err}");
}

#[test]
fn missing_or_corrupt_checkpoint_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.ckpt");
    let out = alore(&["bench", "--ckpt", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.ckpt"));

    let junk = dir.path().join("junk.ckpt");
    fs::write(&junk, b"not a checkpoint").unwrap();
    let out = alore(&["merge", "--ckpt", junk.to_str().unwrap(), "--out", "x"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn train_merge_verify_mask_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let run = dir.path().join("run");
    let out = alore(&["train", "--config", &cfg, "--out", run.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["model.ckpt", "data.ckpt", "metrics.jsonl", "summary.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let metrics = fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 2 * 3);

    let model = run.join("model.ckpt");
    let merged = dir.path().join("merged.ckpt");
    let out = alore(&[
        "merge",
        "--ckpt",
        model.to_str().unwrap(),
        "--out",
        merged.to_str().unwrap(),
    ]);
    assert!(out.status.success());

    let verify = |tol: &str| {
        alore(&[
            "verify",
            "--a",
            model.to_str().unwrap(),
            "--b",
            merged.to_str().unwrap(),
            "--tol",
            tol,
        ])
        .status
        .code()
    };
    assert_eq!(verify("1e-10"), Some(0));
    // Trained adapters are not the identity, so the plain backbone must differ.
    let plain = dir.path().join("plain.ckpt");
    {
        let ck = alore_core::checkpoint::Checkpoint::load(&model).unwrap();
        let (m, _) = alore_core::checkpoint::model_from_checkpoint::<f64>(&ck).unwrap();
        alore_core::checkpoint::model_to_checkpoint(&m, None)
            .unwrap()
            .save(&plain)
            .unwrap();
    }
    let out = alore(&[
        "verify",
        "--a",
        model.to_str().unwrap(),
        "--b",
        plain.to_str().unwrap(),
        "--tol",
        "1e-12",
    ]);
    assert_eq!(out.status.code(), Some(1));

    let out = alore(&[
        "mask-eval",
        "--ckpt",
        model.to_str().unwrap(),
        "--data",
        run.join("data.ckpt").to_str().unwrap(),
        "--mode",
        "increment",
        "--index",
        "4",
    ]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(v["test_loss"], v["full_test_loss"]);

    let out = alore(&[
        "bench",
        "--ckpt",
        merged.to_str().unwrap(),
        "--iters",
        "2",
        "--warmup",
        "0",
    ]);
    assert!(out.status.success());
}

#[test]
fn gradcheck_passes_on_tiny_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = alore(&["gradcheck", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
}
