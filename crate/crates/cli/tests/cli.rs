use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use distok::config::{digest, RunConfig};
use distok::model::{DistokModel, ModelConfig};
use serde_json::Value;
use tempfile::TempDir;

fn distok(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_distok"))
        .args(args)
        .current_dir(cwd)
        .env_remove("DISTOK_OUT_DIR")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout_json(out: &Output) -> Value {
    assert_eq!(code(out), 0, "{}", stderr(out));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn config(dir: &Path, name: &str, json: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, json).unwrap();
    path
}

fn train(dir: &Path, cfg: &str, out: &str) -> Value {
    let path = config(dir, &format!("{out}.json"), cfg);
    stdout_json(&distok(&["train", "--config", path.to_str().unwrap(), "--out-dir", out], dir))
}

const SMALL: &str = r#"{"world": {}, "train": {"total_steps": 120, "sample_period": 40}}"#;

#[test]
fn single_concept_world_is_rejected_with_pointer() {
    let tmp = TempDir::new().unwrap();
    config(tmp.path(), "k1.json", r#"{"world": {"num_known_concepts": 1}}"#);
    let out = distok(&["init-world", "--config", "k1.json"], tmp.path());
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("/world/num_known_concepts"), "{}", stderr(&out));
    assert!(out.stdout.is_empty());
}

#[test]
fn type_errors_carry_their_pointer() {
    let tmp = TempDir::new().unwrap();
    config(tmp.path(), "bad.json", r#"{"world": {}, "train": {"n_accumulation": "eight"}}"#);
    let out = distok(&["train", "--config", "bad.json"], tmp.path());
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("/train/n_accumulation"), "{}", stderr(&out));
}

#[test]
fn init_world_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    config(tmp.path(), "toy.json", r#"{"world": {}}"#);
    let first = stdout_json(&distok(&["init-world", "--config", "toy.json", "--out", "a/world.json"], tmp.path()));
    stdout_json(&distok(&["init-world", "--config", "toy.json", "--out", "b/world.json"], tmp.path()));
    let a = fs::read(tmp.path().join("a/world.json")).unwrap();
    assert_eq!(a, fs::read(tmp.path().join("b/world.json")).unwrap());
    assert_eq!(first["artifacts"]["world"], "a/world.json");
}

#[test]
fn out_dir_comes_from_the_environment() {
    let tmp = TempDir::new().unwrap();
    config(tmp.path(), "toy.json", r#"{"world": {}}"#);
    let out = Command::new(env!("CARGO_BIN_EXE_distok"))
        .args(["init-world", "--config", "toy.json"])
        .current_dir(tmp.path())
        .env("DISTOK_OUT_DIR", "from-env")
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(tmp.path().join("from-env/world.json").exists());
}

#[test]
fn trained_world_file_can_drive_a_later_run() {
    let tmp = TempDir::new().unwrap();
    config(tmp.path(), "toy.json", r#"{"world": {}}"#);
    stdout_json(&distok(&["init-world", "--config", "toy.json", "--out", "w/world.json"], tmp.path()));
    fs::create_dir(tmp.path().join("cfg")).unwrap();
    config(
        tmp.path(),
        "cfg/from_file.json",
        r#"{"world_file": "../w/world.json", "train": {"total_steps": 0}}"#,
    );
    let out = distok(&["train", "--config", "cfg/from_file.json", "--out-dir", "r"], tmp.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(
        fs::read(tmp.path().join("w/world.json")).unwrap(),
        fs::read(tmp.path().join("r/world.json")).unwrap()
    );
}

#[test]
fn zero_steps_checkpoint_equals_initialization() {
    let tmp = TempDir::new().unwrap();
    let manifest = train(tmp.path(), r#"{"world": {}, "train": {"total_steps": 0}}"#, "run");
    let saved = fs::read_to_string(tmp.path().join("run/model.json")).unwrap();
    let fresh = DistokModel::new(ModelConfig::default()).unwrap();
    assert_eq!(DistokModel::from_json(&saved).unwrap(), fresh);
    assert_eq!(saved, fresh.to_json().unwrap());
    assert_eq!(fs::read_to_string(tmp.path().join("run/metrics.jsonl")).unwrap(), "");
    for key in ["world", "model", "pool", "metrics", "config"] {
        assert!(tmp.path().join(manifest["artifacts"][key].as_str().unwrap()).exists(), "{key}");
    }
}

#[test]
fn same_seed_runs_write_identical_metrics() {
    let tmp = TempDir::new().unwrap();
    let m1 = train(tmp.path(), SMALL, "one");
    let m2 = train(tmp.path(), SMALL, "two");
    let read = |d: &str, f: &str| fs::read(tmp.path().join(d).join(f)).unwrap();
    for f in ["metrics.jsonl", "model.json", "concepts.pool.json"] {
        assert_eq!(read("one", f), read("two", f), "{f}");
    }
    assert_eq!(m1["config_digest"], m2["config_digest"]);

    let stored = fs::read_to_string(tmp.path().join("one/config.json")).unwrap();
    let recomputed = digest(&RunConfig::from_json(&stored).unwrap()).unwrap();
    assert_eq!(m1["config_digest"], recomputed.as_str());
    let on_disk: Value = serde_json::from_slice(&read("one", "manifest.json")).unwrap();
    assert_eq!(on_disk, m1);

    let lines = String::from_utf8(read("one", "metrics.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 120);
    for line in lines.lines() {
        serde_json::from_str::<Value>(line).unwrap();
    }
}

#[test]
fn divergence_exits_3_with_replay_bundle() {
    let tmp = TempDir::new().unwrap();
    let path = config(
        tmp.path(),
        "div.json",
        r#"{"world": {}, "train": {"initial_lr": 1e200, "total_steps": 20}}"#,
    );
    let out = distok(&["train", "--config", path.to_str().unwrap(), "--out-dir", "div"], tmp.path());
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).contains("replay.json"));
    let bundle: Value = serde_json::from_slice(&fs::read(tmp.path().join("div/replay.json")).unwrap()).unwrap();
    for key in ["step", "train_config", "model_before_step", "pool", "sub_steps"] {
        assert!(bundle.get(key).is_some(), "{key}");
    }
}

#[test]
fn distribution_argument_is_validated() {
    let tmp = TempDir::new().unwrap();
    train(tmp.path(), r#"{"world": {}, "train": {"total_steps": 0}}"#, "run");
    let out = distok(&["gen-dist", "run", "--dist", "c0:0.7,c1:0.7"], tmp.path());
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("1.4"), "{}", stderr(&out));

    let out = distok(&["gen-dist", "run", "--dist", "dog:1.0"], tmp.path());
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("c0, c1, c2"), "{}", stderr(&out));

    let out = distok(&["fuse", "run", "--pair", "c0,c9"], tmp.path());
    assert_eq!(code(&out), 2);

    let ok = stdout_json(&distok(&["gen-dist", "run", "--dist", "c0:0.6,c1:0.405"], tmp.path()));
    let total: f64 = ok["distribution"]
        .as_array()
        .unwrap()
        .iter()
        .map(|m| m["probability"].as_f64().unwrap())
        .sum();
    assert!((total - 1.0).abs() < 1e-9);
}

#[test]
fn even_split_matches_pair_fusion_with_normalized_input() {
    let tmp = TempDir::new().unwrap();
    train(
        tmp.path(),
        r#"{"world": {}, "model": {"normalize_pair_input": true}, "train": {"total_steps": 40}}"#,
        "run",
    );
    fs::write(tmp.path().join("aliases.json"), r#"{"cat": "c2", "turtle": "c5"}"#).unwrap();
    let pair = stdout_json(&distok(&["fuse", "run", "--pair", "cat,turtle", "--aliases", "aliases.json"], tmp.path()));
    let dist = stdout_json(&distok(&["gen-dist", "run", "--dist", "c5:0.5,c2:0.5"], tmp.path()));
    assert_eq!(pair["token"], dist["token"]);
    assert_eq!(pair["distribution"], dist["distribution"]);
    assert_eq!(pair["pair"], serde_json::json!(["c2", "c5"]));
}

#[test]
fn sampling_reports_clip_rate_and_tokens() {
    let tmp = TempDir::new().unwrap();
    train(tmp.path(), r#"{"world": {}, "train": {"total_steps": 0}}"#, "run");
    let out = stdout_json(&distok(
        &["sample", "run", "--kind", "cauchy", "--count", "5", "--seed", "4"],
        tmp.path(),
    ));
    assert_eq!(out["samples"].as_array().unwrap().len(), 5);
    assert!(out["clip_rate"].as_f64().unwrap() >= 0.0);
    let again = distok(
        &["sample", "run", "--kind", "cauchy", "--count", "5", "--seed", "4", "--out", "s.json"],
        tmp.path(),
    );
    assert_eq!(code(&again), 0);
    assert!(again.stdout.is_empty());
    let written: Value = serde_json::from_slice(&fs::read(tmp.path().join("s.json")).unwrap()).unwrap();
    assert_eq!(written, out);
    assert_eq!(code(&distok(&["sample", "run", "--kind", "poisson"], tmp.path())), 2);
}

#[test]
fn eval_reads_a_suite_file() {
    let tmp = TempDir::new().unwrap();
    train(tmp.path(), r#"{"world": {}, "train": {"total_steps": 0}}"#, "run");
    fs::write(tmp.path().join("suite.txt"), "# two prompts\nc0:0.5,c1:0.5\n\nc2:0.2,c3:0.3,c4:0.5\n").unwrap();
    let manifest = stdout_json(&distok(
        &["eval-kl", "run", "--suite", "suite.txt", "--out-dir", "ev"],
        tmp.path(),
    ));
    let report: Value = serde_json::from_slice(&fs::read(tmp.path().join("ev/eval.json")).unwrap()).unwrap();
    assert_eq!(report["kl_values"].as_array().unwrap().len(), 2);
    let csv = fs::read_to_string(tmp.path().join(manifest["artifacts"]["csv"].as_str().unwrap())).unwrap();
    assert_eq!(csv.lines().count(), 3);

    let builtin = stdout_json(&distok(&["eval-kl", "run", "--out-dir", "ev2"], tmp.path()));
    assert_eq!(builtin["command"], "eval-kl");
    let report: Value = serde_json::from_slice(&fs::read(tmp.path().join("ev2/eval.json")).unwrap()).unwrap();
    assert_eq!(report["kl_values"].as_array().unwrap().len(), 30);
}

#[test]
fn gradcheck_passes_on_fresh_model() {
    let tmp = TempDir::new().unwrap();
    config(tmp.path(), "toy.json", r#"{"world": {}}"#);
    let report = stdout_json(&distok(&["gradcheck", "--config", "toy.json"], tmp.path()));
    assert_eq!(report["passed"], true);
    assert_eq!(report["pipeline"].as_array().unwrap().len(), 3);
}

#[test]
fn gradcheck_catches_injected_fault() {
    let tmp = TempDir::new().unwrap();
    config(
        tmp.path(),
        "small.json",
        r#"{"world": {"token_dim": 8, "embed_dim": 8, "feature_dim": 8, "num_known_concepts": 4},
            "model": {"token_dim": 8, "hidden_dim": 10, "latent_dim": 3}}"#,
    );
    let out = distok(&["gradcheck", "--config", "small.json", "--inject-fault", "1.1"], tmp.path());
    assert_eq!(code(&out), 4, "{}", stderr(&out));
    assert!(stderr(&out).contains("worst is"), "{}", stderr(&out));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["passed"], false);
    assert_eq!(code(&distok(&["gradcheck", "--config", "small.json"], tmp.path())), 0);
}

#[test]
fn ablation_writes_one_row_per_seed() {
    let tmp = TempDir::new().unwrap();
    config(tmp.path(), "abl.json", r#"{"world": {}, "train": {"total_steps": 60, "sample_period": 20}}"#);
    let manifest = stdout_json(&distok(
        &["ablate", "--config", "abl.json", "--seeds", "1,2,3,4,5", "--out-dir", "abl"],
        tmp.path(),
    ));
    let csv = fs::read_to_string(tmp.path().join(manifest["artifacts"]["csv"].as_str().unwrap())).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "seed,kl_full,kl_no_cst,diff");
    assert_eq!(lines.len(), 6);
    let report: Value = serde_json::from_slice(&fs::read(tmp.path().join("abl/ablation.json")).unwrap()).unwrap();
    assert!(report["mean_diff"].is_number());
    assert!(report["full"]["mean"].is_number() && report["no_cst"]["mean"].is_number());

    let too_few = distok(&["ablate", "--config", "abl.json", "--seeds", "1,2"], tmp.path());
    assert_eq!(code(&too_few), 2);
}

#[test]
fn toy_preset_trains_and_generates() {
    let tmp = TempDir::new().unwrap();
    let start = std::time::Instant::now();
    train(tmp.path(), r#"{"world": {}}"#, "toy");
    assert!(start.elapsed().as_secs() < 300);
    for k in 0..8 {
        let name = format!("c{k}");
        let out = stdout_json(&distok(&["gen-dist", "toy", "--dist", &format!("{name}:1.0")], tmp.path()));
        assert_eq!(out["argmax"], name.as_str());
    }
}
