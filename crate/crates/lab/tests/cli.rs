use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use simt_lab::manifest::{RunManifest, Status, LOCK_FILE};

fn simt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_simt"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("run simt")
}

fn out_arg(dir: &Path) -> String {
    dir.display().to_string()
}

const SMALL: [&str; 6] = ["--set", "train_size=30", "--set", "valid_size=10", "--set", "test_size=10"];

#[test]
fn make_data_writes_corpus_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = out_arg(dir.path());
    let mut args = vec!["make-data", "--out", &out, "--seed", "4", "--set", "task=ambiguous", "--set", "features=oracle"];
    args.extend(SMALL);
    let o = simt(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(metrics["train"], 30);

    let m = RunManifest::read(dir.path()).unwrap();
    assert_eq!(m.status, Status::Completed);
    assert_eq!(m.seed, 4);
    assert_eq!(m.config["task"], "ambiguous");
    for rel in ["corpus/train.src", "corpus/test.tgt", "features/valid.feat"] {
        assert!(m.artifacts.iter().any(|a| a.path == rel), "{rel} not hashed");
        assert!(dir.path().join(rel).exists());
    }
    assert!(!dir.path().join(LOCK_FILE).exists());
}

#[test]
fn config_file_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# copy data\ntask = reverse\ntrain_size = 12\n").unwrap();
    let out = out_arg(&dir.path().join("data"));
    let o = simt(&["make-data", "--config", &cfg.display().to_string(), "--out", &out, "--set", "train_size=15"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m = RunManifest::read(&dir.path().join("data")).unwrap();
    assert_eq!(m.config["task"], "reverse");
    assert_eq!(m.config["train_size"], "15");
    let lines = fs::read_to_string(dir.path().join("data/corpus/train.src")).unwrap().lines().count();
    assert_eq!(lines, 15);
}

#[test]
fn configuration_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = out_arg(dir.path());
    for args in [
        vec!["make-data", "--out", &out, "--set", "no_such_key=1"],
        vec!["make-data", "--out", &out, "--set", "lr=fast"],
        vec!["rl-train", "--out", &out, "--set", "config=RL-att-VC"],
        vec!["rl-train", "--out", &out],
        vec!["make-data", "--out", &out, "--config", "/nonexistent/run.cfg"],
    ] {
        let o = simt(&args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn data_errors_exit_with_3_and_record_the_failure() {
    let dir = tempfile::tempdir().unwrap();
    let empty = tempfile::tempdir().unwrap();
    let out = out_arg(dir.path());
    let env_dir = format!("env_dir={}", empty.path().display());
    let o = simt(&["rl-train", "--out", &out, "--set", &env_dir]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    let m = RunManifest::read(dir.path()).unwrap();
    assert_eq!(m.status, Status::Failed);
    assert!(m.error.is_some());

    let corpus = format!("corpus_dir={}", empty.path().display());
    let o = simt(&["pretrain", "--out", &out, "--set", "task=external", "--set", &corpus]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn locked_output_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join(LOCK_FILE), "").unwrap();
    let out = out_arg(dir.path());
    let o = simt(&["make-data", "--out", &out]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!dir.path().join("manifest.json").exists());
}

#[test]
fn fixed_policy_pipeline_and_compare() {
    let dir = tempfile::tempdir().unwrap();
    let p = |rel: &str| out_arg(&dir.path().join(rel));
    let mut base = vec!["--set", "emb_dim=8", "--set", "hidden_dim=16", "--set", "env_max_epochs=1"];
    base.extend(SMALL);

    let mut args = vec!["pretrain", "--out"];
    let env = p("env");
    args.push(&env);
    args.extend(&base);
    assert!(simt(&args).status.success());

    let env_set = format!("env_dir={env}");
    let mut logs = Vec::new();
    for (name, preset) in [("wait", "wait-k"), ("cons", "consecutive")] {
        let out = p(name);
        let preset = format!("config={preset}");
        let mut args = vec!["evaluate", "--out", &out, "--set", &env_set, "--set", &preset, "--set", "wait_k=2"];
        args.extend(&base);
        let o = simt(&args);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        logs.push(format!("{out}/transcripts.jsonl"));
    }
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("wait/report.json")).unwrap()).unwrap();
    assert_eq!(report["system"], "wait-2");
    assert_eq!(report["sentences"], 10);

    let out = p("report");
    let mut args = vec!["report", "--out", &out];
    args.extend(&base);
    args.extend(logs.iter().map(String::as_str));
    assert!(simt(&args).status.success());
    assert!(dir.path().join("report/log-1.lag_hist.csv").exists());
    assert!(dir.path().join("report/log-0.trace.tsv").exists());
    // Fixed policies log no attention.
    let strict_out = p("report-attention");
    let mut strict = vec!["report", "--attention", "--out", &strict_out];
    strict.extend(&base);
    strict.extend(logs.iter().map(String::as_str));
    assert_eq!(simt(&strict).status.code(), Some(3));

    let out = p("compare");
    let mut args = vec!["compare", "--out", &out];
    args.extend(&base);
    args.extend([logs[1].as_str(), logs[0].as_str()]);
    let o = simt(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let c: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(c["p_value"].as_f64().unwrap() <= 1.0);
}
