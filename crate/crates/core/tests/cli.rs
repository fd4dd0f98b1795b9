//! End-to-end coverage of every CLI subcommand through the compiled binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_souplab"))
}

fn run(args: &[&str], dir: &Path) -> Output {
    bin()
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn read(dir: &Path, rel: &str) -> String {
    fs::read_to_string(dir.join(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
}

#[test]
fn train_sft_writes_metrics_and_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["train-sft", "--out", "o", "--seed", "1"], tmp.path());
    assert_ok(&out, "train-sft");
    assert!(String::from_utf8_lossy(&out.stdout).contains("train-sft"));
    let csv = read(tmp.path(), "o/metrics.csv");
    assert!(csv.starts_with("key,value\n"));
    assert!(csv.contains("loss.0,"));
    assert!(csv.contains("accuracy.copy,"));
    let json: serde_json::Value =
        serde_json::from_str(&read(tmp.path(), "o/metrics.json")).unwrap();
    assert!(json.get("loss.0").is_some());
    assert!(tmp.path().join("o/checkpoint.ckpt").exists());
}

#[test]
fn train_pref_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["train-pref", "--out", "o", "--seed", "2"], tmp.path());
    assert_ok(&out, "train-pref");
    assert!(tmp.path().join("o/checkpoint.ckpt").exists());
    assert!(read(tmp.path(), "o/metrics.csv").contains("loss.0,"));
}

#[test]
fn train_rm_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["train-rm", "--out", "o", "--seed", "3"], tmp.path());
    assert_ok(&out, "train-rm");
    let csv = read(tmp.path(), "o/metrics.csv");
    assert!(csv.contains("extra.mean_fill,"));
}

#[test]
fn merge_rejects_bad_weight_sum() {
    let tmp = tempfile::tempdir().unwrap();
    assert_ok(&run(&["train-sft", "--out", "a", "--seed", "1"], tmp.path()), "train-sft");
    fs::write(
        tmp.path().join("bad.toml"),
        "[merge]\ninputs = [\"a/checkpoint.ckpt\", \"a/checkpoint.ckpt\"]\nweights = [0.6, 0.39]\n",
    )
    .unwrap();
    let out = run(&["merge", "--config", "bad.toml", "--out", "m"], tmp.path());
    assert_eq!(out.status.code(), Some(2), "bad weights must exit with the config category");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("sum") && stderr.contains("0.99"), "{stderr}");
}

#[test]
fn merge_accepts_valid_weights() {
    let tmp = tempfile::tempdir().unwrap();
    assert_ok(&run(&["train-sft", "--out", "a", "--seed", "1"], tmp.path()), "train-sft");
    assert_ok(&run(&["train-sft", "--out", "b", "--seed", "2"], tmp.path()), "train-sft");
    fs::write(
        tmp.path().join("ok.toml"),
        "[merge]\ninputs = [\"a/checkpoint.ckpt\", \"b/checkpoint.ckpt\"]\nweights = [0.6, 0.4]\n",
    )
    .unwrap();
    let out = run(&["merge", "--config", "ok.toml", "--out", "m"], tmp.path());
    assert_ok(&out, "merge");
    assert!(tmp.path().join("m/merged.ckpt").exists());
}

#[test]
fn soup_exp_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["soup-exp", "--out", "o", "--seed", "4"], tmp.path());
    assert_ok(&out, "soup-exp");
    let csv = read(tmp.path(), "o/metrics.csv");
    assert!(csv.contains("extra.preservation."));
    assert!(tmp.path().join("o/soup.ckpt").exists());
    assert!(tmp.path().join("o/polished.ckpt").exists());
}

#[test]
fn polish_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["polish", "--out", "o", "--seed", "5"], tmp.path());
    assert_ok(&out, "polish");
    let csv = read(tmp.path(), "o/metrics.csv");
    assert!(csv.contains("extra.heldout.bon-sft,"));
    assert!(csv.contains("extra.heldout.online-copg-0,"));
}

#[test]
fn tabular_emits_tv_to_optimum() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["tabular", "--out", "o", "--seed", "6"], tmp.path());
    assert_ok(&out, "tabular");
    let json: serde_json::Value =
        serde_json::from_str(&read(tmp.path(), "o/metrics.json")).unwrap();
    let tv = json["extra.tv_to_optimal"].as_f64().expect("tv key present");
    assert!(tv >= 0.0 && tv < 1e-3, "tabular CoPG should reach the optimum, tv={tv}");
}

#[test]
fn cost_model_runs() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("mesh.toml"), "[mesh]\ndp = 1\nfsdp = 2\nsp = 2\ntp = 1\n").unwrap();
    let out = run(&["cost-model", "--config", "mesh.toml", "--out", "o"], tmp.path());
    assert_ok(&out, "cost-model");
    let csv = read(tmp.path(), "o/metrics.csv");
    assert!(csv.contains("extra.forward_bytes_per_layer,"));
    assert!(csv.contains("extra.devices,4"));
}

#[test]
fn eval_runs_on_saved_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    assert_ok(&run(&["train-sft", "--out", "a", "--seed", "1"], tmp.path()), "train-sft");
    let out = run(
        &["eval", "--checkpoint", "a/checkpoint.ckpt", "--out", "e"],
        tmp.path(),
    );
    assert_ok(&out, "eval");
    assert!(read(tmp.path(), "e/metrics.csv").contains("accuracy.modsum,"));
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("bad.toml"), "seed = 1\nbanana = 2\n").unwrap();
    let out = run(&["train-sft", "--config", "bad.toml", "--out", "o"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("banana"));
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["eval", "--checkpoint", "nope.ckpt", "--out", "e"], tmp.path());
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn repeated_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    for sub in ["train-sft", "train-pref", "train-rm", "tabular"] {
        assert_ok(&run(&[sub, "--out", "r1", "--seed", "9"], tmp.path()), sub);
        assert_ok(&run(&[sub, "--out", "r2", "--seed", "9"], tmp.path()), sub);
        for f in ["metrics.csv", "metrics.json"] {
            assert_eq!(
                fs::read(tmp.path().join("r1").join(f)).unwrap(),
                fs::read(tmp.path().join("r2").join(f)).unwrap(),
                "{sub}/{f}"
            );
        }
        fs::remove_dir_all(tmp.path().join("r1")).unwrap();
        fs::remove_dir_all(tmp.path().join("r2")).unwrap();
    }
}
