use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mtlsent::combiner::{corpus_id, save_contextual, save_embeddings, ContextualVectors, EmbeddingSet};
use mtlsent::tensor::Tensor;
use mtlsent::text::{load_dataset, Schema};
use serde_json::Value;
use tempfile::TempDir;

fn mtlsent(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtlsent"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = mtlsent(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// Synthetic data plus a small train config in a fresh directory.
fn workspace() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("synth.json"), r#"{"n": 120, "word_dim": 6}"#).unwrap();
    ok(dir.path(), &["synth", "--config", "synth.json", "--out", "syn", "--seed", "4"]);
    dir
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn log_lines(p: &Path) -> Vec<Value> {
    fs::read_to_string(p)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn train(dir: &Path, out: &str, extra: &[&str]) {
    let mut args = vec![
        "train",
        "--config",
        "syn/train.json",
        "--out",
        out,
        "--epochs",
        "2",
        "--hidden",
        "3",
    ];
    args.extend_from_slice(extra);
    ok(dir, &args);
}

#[test]
fn sp_log_has_no_adversarial_column() {
    let w = workspace();
    train(w.path(), "sp", &["--mode", "sp"]);
    train(w.path(), "asp", &["--mode", "asp"]);
    let sp = log_lines(&w.path().join("sp/train_log.jsonl"));
    let asp = log_lines(&w.path().join("asp/train_log.jsonl"));
    assert_eq!(sp.len(), 2);
    assert!(sp.iter().all(|l| l.get("adv_loss").is_none()));
    assert!(asp.iter().all(|l| l["adv_loss"].is_f64()));
    for l in sp.iter().chain(&asp) {
        assert_eq!(l["config_hash"].as_str().unwrap().len(), 64);
        assert_eq!(l["seed"], 4);
    }
}

#[test]
fn missing_dataset_is_a_config_error() {
    let w = workspace();
    let mut cfg = read_json(&w.path().join("syn/train.json"));
    cfg["tasks"][1]["dev"] = "b/missing.tsv".into();
    fs::write(w.path().join("syn/broken.json"), cfg.to_string()).unwrap();
    let out = mtlsent(w.path(), &["train", "--config", "syn/broken.json", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("tasks[1].dev"), "{err}");
    assert!(!w.path().join("x").exists(), "validation runs before any output is written");

    let out = mtlsent(
        w.path(),
        &["train", "--config", "syn/train.json", "--out", "x", "--beta-gamma", "nope"],
    );
    assert_eq!(out.status.code(), Some(2));
    let out = mtlsent(w.path(), &["train", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn preset_sets_beta_and_gamma() {
    let w = workspace();
    train(w.path(), "p", &["--beta", "0.3", "--gamma", "0.2"]);
    train(w.path(), "q", &["--beta-gamma", "qqp_snli"]);
    let p = log_lines(&w.path().join("p/train_log.jsonl"));
    assert_eq!((p[0]["beta"].as_f64(), p[0]["gamma"].as_f64()), (Some(0.3), Some(0.2)));
    for l in log_lines(&w.path().join("q/train_log.jsonl")) {
        assert_eq!(l["beta"].as_f64(), Some(0.01));
        assert_eq!(l["gamma"].as_f64(), Some(0.05));
    }
    let run = read_json(&w.path().join("q/run.json"));
    assert_eq!(run["config"]["preset"], "qqp_snli");
}

#[test]
fn embed_then_eval_share_corpus_ids() {
    let w = workspace();
    let d = w.path();
    train(d, "m", &[]);
    for split in ["train", "dev", "test"] {
        ok(
            d,
            &[
                "embed",
                "--bundle",
                "m",
                "--dataset",
                &format!("syn/a/{split}.tsv"),
                "--out",
                &format!("e_{split}"),
            ],
        );
    }
    let cfg = r#"{"bundle": "m", "tasks": [
        {"name": "live", "train": "syn/a/train.tsv", "dev": "syn/a/dev.tsv", "test": "syn/a/test.tsv"},
        {"name": "cached", "train": "syn/a/train.tsv", "dev": "syn/a/dev.tsv", "test": "syn/a/test.tsv",
         "embeddings": {"train": ["e_train/embeddings.semb"], "dev": ["e_dev/embeddings.semb"], "test": ["e_test/embeddings.semb"]}}]}"#;
    fs::write(d.join("eval.json"), cfg).unwrap();
    ok(d, &["eval", "--config", "eval.json", "--out", "ev"]);
    let ev = read_json(&d.join("ev/eval.json"));
    let side = read_json(&d.join("e_test/embeddings.semb.json"));
    assert_eq!(ev["corpus_ids"]["live"]["test"][0], side["corpus_id"]);
    assert_eq!(ev["corpus_ids"]["live"], ev["corpus_ids"]["cached"]);
    let reports = ev["reports"].as_array().unwrap();
    assert_eq!(reports[0]["test"], reports[1]["test"]);
    assert_eq!(reports[0]["config_hash"], ev["config_hash"]);
    let csv = fs::read_to_string(d.join("ev/eval.csv")).unwrap();
    assert!(csv.starts_with("task,metric,dev,test,dev_f1,test_f1,config_hash,seed\n"));
    assert_eq!(side["config_hash"].as_str().unwrap().len(), 64);

    // A cache from another corpus is refused.
    let wrong = cfg.replace("e_dev/embeddings.semb", "e_test/embeddings.semb");
    fs::write(d.join("wrong.json"), wrong).unwrap();
    let out = mtlsent(d, &["eval", "--config", "wrong.json", "--out", "ev2"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("corpus id"));
}

#[test]
fn combine_joins_provenance_tags() {
    let w = workspace();
    let d = w.path();
    train(d, "m", &[]);
    ok(d, &["embed", "--bundle", "m", "--dataset", "syn/a/test.tsv", "--out", "e"]);
    let records = load_dataset(d.join("syn/a/test.tsv"), Schema::Single).unwrap();
    let lines: Vec<String> = records.iter().map(|r| r.sentence1.join(" ")).collect();
    let id = corpus_id(&lines);
    let n = lines.len();

    let ext = Tensor::matrix(n, 5, (0..n * 5).map(|i| i as f64).collect()).unwrap();
    save_embeddings(&d.join("gensen.semb"), &EmbeddingSet::new(id, ext, "gensen").unwrap()).unwrap();
    let words: Vec<Tensor> = records
        .iter()
        .map(|r| Tensor::matrix(r.sentence1.len(), 3, vec![0.5; r.sentence1.len() * 3]).unwrap())
        .collect();
    save_contextual(&d.join("elmo.sctx"), &ContextualVectors::new(id, 3, words, "elmo").unwrap()).unwrap();

    let stdout = ok(d, &["combine", "e/embeddings.semb", "gensen.semb", "elmo.sctx", "--out", "c"]);
    assert!(stdout.contains("mtl:concat_all+external:gensen+contextual:avg"), "{stdout}");
    let side = read_json(&d.join("c/combined.semb.json"));
    assert_eq!(side["provenance"], "mtl:concat_all+external:gensen+contextual:avg");
    assert_eq!(side["dim"], 3 * 6 + 5 + 3);

    let other = Tensor::zeros(&[n, 2]);
    save_embeddings(&d.join("other.semb"), &EmbeddingSet::new([7; 32], other, "x").unwrap()).unwrap();
    let out = mtlsent(d, &["combine", "gensen.semb", "other.semb", "--out", "c2"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn analyze_reports_one_alpha_per_encoder() {
    let w = workspace();
    let d = w.path();
    train(d, "m", &[]);
    ok(
        d,
        &[
            "embed",
            "--bundle",
            "m",
            "--dataset",
            "syn/a/train.tsv",
            "--out",
            "s",
            "--mode",
            "shared",
        ],
    );
    ok(
        d,
        &[
            "embed",
            "--bundle",
            "m",
            "--dataset",
            "syn/a/train.tsv",
            "--out",
            "p",
            "--mode",
            "private:a",
        ],
    );
    fs::write(
        d.join("an.json"),
        r#"{"data": "syn/a/train.tsv", "encoders": [
            {"name": "shared", "embeddings": "s/embeddings.semb"},
            {"name": "private", "embeddings": "p/embeddings.semb"}]}"#,
    )
    .unwrap();
    ok(d, &["analyze", "--config", "an.json", "--out", "an", "--seed", "2"]);
    let an = read_json(&d.join("an/analyze.json"));
    let alpha: Vec<f64> = an["alpha"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert_eq!(alpha.len(), 2);
    assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert_eq!(an["seed"], 2);
}

#[test]
fn probe_writes_accuracy_and_chance() {
    let w = workspace();
    let d = w.path();
    train(d, "m", &[]);
    fs::write(
        d.join("pr.json"),
        r#"{"bundle": "m", "sets": [{"task": "a", "data": "syn/a/test.tsv"}, {"task": "b", "data": "syn/b/test.tsv"}]}"#,
    )
    .unwrap();
    ok(d, &["probe", "--config", "pr.json", "--out", "pr", "--encoder", "private"]);
    let pr = read_json(&d.join("pr/probe.json"));
    assert_eq!(pr["encoder"], "private");
    assert!(pr["result"]["accuracy"].as_f64().unwrap() <= 1.0);
    assert_eq!(pr["result"]["num_tasks"], 2);
}

#[test]
fn gradcheck_passes_and_names_a_broken_op() {
    let d = tempfile::tempdir().unwrap();
    let stdout = ok(d.path(), &["gradcheck", "ops"]);
    assert!(stdout.contains("all 21 checks passed"), "{stdout}");
    let out = mtlsent(d.path(), &["gradcheck", "ops", "--inject-fault", "sigmoid"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("failed for: sigmoid"));
    let out = mtlsent(d.path(), &["gradcheck", "ops", "--inject-fault", "nonsense"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn identical_runs_are_byte_identical() {
    let w = workspace();
    let d = w.path();
    train(d, "r1", &["--mode", "asp"]);
    train(d, "r2", &["--mode", "asp"]);
    let files = [
        "train_log.jsonl",
        "manifest.json",
        "shared.json",
        "private-a.json",
        "private-b.json",
        "run.json",
    ];
    for f in files {
        let (a, b): (PathBuf, PathBuf) = (d.join("r1").join(f), d.join("r2").join(f));
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap(), "{f} differs");
    }
    fs::write(
        d.join("ev.json"),
        r#"{"bundle": "r1", "tasks": [{"name": "b", "train": "syn/b/train.tsv", "dev": "syn/b/dev.tsv", "test": "syn/b/test.tsv"}]}"#,
    )
    .unwrap();
    ok(d, &["eval", "--config", "ev.json", "--out", "v1"]);
    ok(d, &["eval", "--config", "ev.json", "--out", "v2"]);
    for f in ["eval.json", "eval.csv"] {
        assert_eq!(fs::read(d.join("v1").join(f)).unwrap(), fs::read(d.join("v2").join(f)).unwrap());
    }
    train(d, "r3", &["--mode", "asp", "--seed", "5"]);
    assert_ne!(
        fs::read(d.join("r1/shared.json")).unwrap(),
        fs::read(d.join("r3/shared.json")).unwrap()
    );
}
