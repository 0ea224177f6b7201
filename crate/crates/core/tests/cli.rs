//! The `bam` binary end to end: synth, train, resume, eval, analyze.

use std::path::Path;
use std::process::Command;

fn bam(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_bam")).args(args).env("RUST_LOG", "warn").output().unwrap();
    assert!(out.status.success(), "bam {args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn synth_train_eval_analyze() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let config = dir.path().join("tiny.toml");
    std::fs::write(
        &config,
        "dim = 16\nheads = 2\nnum_queries = 3\nenc_layers = 1\ndec_layers = 1\nbatch_size = 4\nepochs = 1\neval_every = 1\nlr = 1e-3\n",
    )
    .unwrap();

    assert!(bam(&["synth", "--out", p(&data), "--n", "6", "--seed", "3"]).contains("wrote 6 samples"));
    bam(&["train", "--config", p(&config), "--data", p(&data), "--out", p(&run)]);
    let last = run.join("last.safetensors");
    assert!(last.exists());
    assert!(run.join("train_log.csv").exists());

    // one more epoch on top of the first
    std::fs::write(&config, std::fs::read_to_string(&config).unwrap().replace("epochs = 1", "epochs = 2")).unwrap();
    let resumed = dir.path().join("resumed");
    bam(&["train", "--config", p(&config), "--data", p(&data), "--out", p(&resumed), "--resume", p(&last)]);
    let log = std::fs::read_to_string(resumed.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3, "header plus two epochs:\n{log}");

    let preds = dir.path().join("preds.jsonl");
    let report: serde_json::Value =
        serde_json::from_str(&bam(&["eval", "--ckpt", p(&last), "--data", p(&data), "--out", p(&preds)])).unwrap();
    for key in ["R1@0.3", "R1@0.5", "R1@0.7", "mAP@0.5", "mAP@0.75", "mAP", "mIoU"] {
        let v = report[key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "{key} = {v}");
    }
    assert_eq!(std::fs::read_to_string(&preds).unwrap().lines().count(), 6);

    for which in ["hit_rate", "center_bins", "offsets", "correlation"] {
        let out = dir.path().join(format!("{which}.csv"));
        bam(&["analyze", "--preds", p(&preds), "--which", which, "--out", p(&out)]);
    }
    assert!(dir.path().join("hit_rate.csv").exists());
}

#[test]
fn bad_config_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    std::fs::write(&config, "dim = 16\nheads = 3\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_bam"))
        .args(["train", "--config", p(&config), "--data", p(dir.path()), "--out", p(&dir.path().join("o"))])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("divisible"));
}
