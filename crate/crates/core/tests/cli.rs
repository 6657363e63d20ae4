//! The `pagnet` binary end to end: every verb, and the error contract.

use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 1
mode = "pagnet"

[env.hallway]
lengths = [2, 3]

[train]
batch_size = 4
total_env_steps = 300
eval_interval = 150
eval_episodes = 3
target_sync_interval = 10
collect_episodes = 20
pretrain_updates = 5
pretrain_batch = 8

[model.weight_net]
dim = 8

[model.generator]
widths = [4, 4, 8]

[model.discriminator]
embed = 16
channels = [2, 4, 4, 4]

[model.decoder]
dim = 16
heads = 2
layers = 1
ffn_dim = 16

[model.mixer]
embed = 8
hyper_hidden = 16
"#;

fn pagnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pagnet")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = pagnet(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn every_verb_runs_on_a_tiny_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let c = s(&cfg);

    let data = dir.path().join("data.jsonl");
    let out = ok(&["collect", "--config", c, "--output", s(&data)]);
    assert!(out.contains("wrote 20 episodes"));
    assert_eq!(std::fs::read_to_string(&data).unwrap().lines().count(), 20);

    let pre = dir.path().join("pre");
    let out = ok(&["pretrain", "--config", c, "--dataset", s(&data), "--out-dir", s(&pre)]);
    assert!(out.contains("held-out masked mse"));
    assert!(pre.join("pretrained.pagn").exists() && pre.join("pretrain_heldout.csv").exists());

    let mut metrics = Vec::new();
    let pretrained = pre.join("pretrained.pagn");
    for (mode, extra) in [("pagnet", vec![]), ("pagnet_pt", vec!["--pretrained", s(&pretrained)])] {
        let run = dir.path().join(mode);
        let mut args = vec!["train", "--config", c, "--mode", mode, "--out-dir", s(&run)];
        args.extend(extra);
        let out = ok(&args);
        let summary: serde_json::Value = serde_json::from_str(&out).unwrap();
        assert_eq!(summary["mode"], mode);
        assert!(summary["env_steps"].as_u64().unwrap() >= 300);
        metrics.push(run.join("metrics.csv"));
    }
    let ck = dir.path().join("pagnet/checkpoint.pagn");

    let ev = dir.path().join("eval");
    let out = ok(&["evaluate", "--config", c, "--checkpoint", s(&ck), "--episodes", "4", "--out-dir", s(&ev)]);
    assert!(out.contains("wrote"));
    let first = std::fs::read_to_string(ev.join("eval_episodes.csv")).unwrap();
    ok(&["evaluate", "--config", c, "--checkpoint", s(&ck), "--episodes", "4", "--out-dir", s(&ev)]);
    assert_eq!(first, std::fs::read_to_string(ev.join("eval_episodes.csv")).unwrap());

    let tr = dir.path().join("trace");
    let out = ok(&["trace", "--config", c, "--checkpoint", s(&ck), "--out-dir", s(&tr)]);
    assert!(out.contains("generated positions match"));
    for f in ["trace.csv", "trace_weights.svg", "trace_completion.svg"] {
        assert!(tr.join(f).exists(), "{f}");
    }

    let cv = dir.path().join("curves");
    ok(&["curves", s(&metrics[0]), s(&metrics[1]), "--metric", "test_return", "--metric", "mean_W", "--out-dir", s(&cv)]);
    for f in ["curves_test_return.csv", "curves_test_return.svg", "curves_mean_W.csv", "curves_mean_W.svg"] {
        assert!(cv.join(f).exists(), "{f}");
    }
}

fn expect_error(args: &[&str], code: i32, category: &str) {
    let out = pagnet(args);
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(out.status.code(), Some(code), "{args:?}: {err}");
    assert!(err.starts_with(&format!("error[{category}]: ")), "{args:?}: {err}");
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
}

#[test]
fn failures_use_the_error_format() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let c = s(&cfg);
    expect_error(&["launch"], 2, "usage");
    expect_error(&["train", "--config", c, "--mode", "qlearn"], 2, "config");
    expect_error(&["train", "--config", c, "--set", "train.batch_size=0"], 2, "config");
    expect_error(&["train", "--config", c, "--set", "train.no_such_key=1"], 2, "config");
    expect_error(&["train", "--config", c, "--mode", "pagnet_pt", "--out-dir", s(&dir.path().join("x"))], 2, "config");
    let missing = dir.path().join("missing.pagn");
    let out = pagnet(&["evaluate", "--config", c, "--checkpoint", s(&missing)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error["));
    assert!(pagnet(&["--help"]).status.success());
}
