use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use case_core::corpus::write_examples;
use case_core::synthetic::{toy_corpus, ToySpec};
use serde_json::Value;

fn case(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_case"))
        .args(args)
        .env_remove("CASE_CONFIG")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn raw_corpus(dir: &Path, n: usize) -> PathBuf {
    let spec = ToySpec {
        examples: n,
        ..ToySpec::default()
    };
    let path = dir.join("raw.jsonl");
    write_examples(&path, &toy_corpus(&spec)).unwrap();
    path
}

fn prepare(dir: &Path, raw: &Path, name: &str) -> PathBuf {
    let out = dir.join(name);
    let o = case(&[
        "prepare",
        "--input",
        p(raw),
        "--output-dir",
        p(&out),
        "--vocab-size",
        "compact",
        "--max-query-len",
        "12",
        "--max-passage-len",
        "12",
        "--max-response-len",
        "8",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    out
}

const TINY: [&str; 14] = [
    "--hidden-size",
    "16",
    "--num-heads",
    "2",
    "--ffn-size",
    "32",
    "--encoder-layers",
    "1",
    "--fusion-layers",
    "1",
    "--decoder-layers",
    "1",
    "--dropout",
    "0",
];

fn train(data: &Path, out: &Path, steps: &str, extra: &[&str]) -> Output {
    let mut args = vec![
        "train",
        "--data",
        p(data),
        "--output-dir",
        p(out),
        "--total-steps",
        steps,
        "--warmup-steps",
        "0",
        "--batch-size",
        "2",
        "--seed",
        "3",
    ];
    args.extend_from_slice(&TINY);
    args.extend_from_slice(extra);
    case(&args)
}

#[test]
fn prepare_writes_one_record_per_line_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let raw = raw_corpus(dir.path(), 10);
    let out = prepare(dir.path(), &raw, "prep");
    let text = fs::read_to_string(out.join("examples.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 10);
    let snapshot: Vec<Vec<u8>> = ["examples.jsonl", "meta.json", "vocab.txt", "frequencies.tsv"]
        .iter()
        .map(|f| fs::read(out.join(f)).unwrap())
        .collect();
    prepare(dir.path(), &raw, "prep");
    for (f, before) in ["examples.jsonl", "meta.json", "vocab.txt", "frequencies.tsv"].iter().zip(snapshot) {
        assert_eq!(fs::read(out.join(f)).unwrap(), before, "{f} changed");
    }
}

#[test]
fn corrupt_line_is_reported_by_number() {
    let dir = tempfile::tempdir().unwrap();
    let raw = raw_corpus(dir.path(), 6);
    let mut lines: Vec<String> = fs::read_to_string(&raw).unwrap().lines().map(String::from).collect();
    lines[3] = "{\"conversation_id\": 5".into();
    fs::write(&raw, lines.join("\n")).unwrap();
    let o = case(&["prepare", "--input", p(&raw), "--output-dir", p(&dir.path().join("x"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 4"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(case(&["train"]).status.code(), Some(1));
    assert_eq!(case(&["frobnicate"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let raw = raw_corpus(dir.path(), 2);
    let o = case(&["prepare", "--input", p(&raw), "--output-dir", p(dir.path()), "--vocab-size", "huge"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn stats_prints_every_key() {
    let dir = tempfile::tempdir().unwrap();
    let raw = raw_corpus(dir.path(), 1);
    let o = case(&["stats", "--input", p(&raw)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    for key in [
        "#examples",
        "#query length",
        "#answer length",
        "#passage length",
        "#pairwise passage similarity",
        "#1-gram overlap",
        "#2-gram overlap",
        "#3-gram overlap",
        "#4-gram overlap",
        "#query common words ratio",
        "#answer common words ratio",
    ] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
    let o1 = v["#1-gram overlap"].as_f64().unwrap();
    let o2 = v["#2-gram overlap"].as_f64().unwrap();
    assert!(o1 >= o2);

    let empty = dir.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    assert_ne!(case(&["stats", "--input", p(&empty)]).status.code(), Some(0));
}

#[test]
fn zero_step_checkpoint_evaluates_with_all_keys() {
    let dir = tempfile::tempdir().unwrap();
    let raw = raw_corpus(dir.path(), 4);
    let data = prepare(dir.path(), &raw, "prep");
    let ckpt = dir.path().join("ckpt");
    let o = train(&data, &ckpt, "0", &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["config.json", "weights.bin", "ema.bin", "optimizer.bin", "step.json", "vocab.txt"] {
        assert!(ckpt.join(f).exists(), "missing {f}");
    }
    let ranking = dir.path().join("ranking.jsonl");
    let o = case(&[
        "eval",
        "--checkpoint",
        p(&ckpt),
        "--data",
        p(&data),
        "--ranking-output",
        p(&ranking),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    for key in ["rouge1", "rouge2", "rougeL", "bleu", "map", "recall_at_5", "ndcg"] {
        let x = v[key].as_f64().unwrap_or_else(|| panic!("missing {key}"));
        assert!((0.0..=100.0).contains(&x), "{key} = {x}");
    }
    let lines: Vec<Value> = fs::read_to_string(&ranking)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[0]["ranking"].as_array().unwrap().len(), 3);
    assert_eq!(lines[0]["scores"].as_array().unwrap().len(), 3);
}

#[test]
fn greedy_generation_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let raw = raw_corpus(dir.path(), 4);
    let data = prepare(dir.path(), &raw, "prep");
    let ckpt = dir.path().join("ckpt");
    assert!(train(&data, &ckpt, "3", &[]).status.success());
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = case(&["generate", "--checkpoint", p(&ckpt), "--data", p(&data), "--output", p(&out)]);
        assert!(o.status.success(), "{}", stderr(&o));
        fs::read(out).unwrap()
    };
    let (a, b) = (run("a.jsonl"), run("b.jsonl"));
    assert_eq!(a, b);
    let first: Value = serde_json::from_str(String::from_utf8(a).unwrap().lines().next().unwrap()).unwrap();
    for key in ["conversation_id", "turn_index", "hypothesis", "reference"] {
        assert!(first.get(key).is_some(), "missing {key}");
    }
    let beam = dir.path().join("beam.jsonl");
    let o = case(&[
        "generate",
        "--checkpoint",
        p(&ckpt),
        "--data",
        p(&data),
        "--output",
        p(&beam),
        "--strategy",
        "beam",
        "--beam-size",
        "2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn fixed_seed_training_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let raw = raw_corpus(dir.path(), 4);
    let data = prepare(dir.path(), &raw, "prep");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(train(&data, &a, "4", &[]).status.success());
    assert!(train(&data, &b, "4", &[]).status.success());
    for f in ["weights.bin", "ema.bin", "optimizer.bin", "train_log.jsonl"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn disabled_sti_is_absent_from_the_log() {
    let dir = tempfile::tempdir().unwrap();
    let raw = raw_corpus(dir.path(), 4);
    let data = prepare(dir.path(), &raw, "prep");
    let ckpt = dir.path().join("ckpt");
    let o = train(&data, &ckpt, "3", &["--disable-sti"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = fs::read_to_string(ckpt.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    for line in log.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        assert!(v.get("l_sti").is_none());
        assert!(v.get("l_rps").is_some() && v.get("l_rg").is_some());
    }
}

#[test]
fn config_file_from_environment_is_used() {
    let dir = tempfile::tempdir().unwrap();
    let raw = raw_corpus(dir.path(), 2);
    let data = prepare(dir.path(), &raw, "prep");
    let cfg = dir.path().join("run.json");
    fs::write(&cfg, r#"{"train": {"total_steps": 2, "warmup_steps": 1, "batch_size": 1, "disable_rps": true}}"#).unwrap();
    let ckpt = dir.path().join("ckpt");
    let mut args = vec!["train", "--data", p(&data), "--output-dir", p(&ckpt)];
    args.extend_from_slice(&TINY);
    let o = Command::new(env!("CARGO_BIN_EXE_case"))
        .args(&args)
        .env("CASE_CONFIG", &cfg)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let log = fs::read_to_string(ckpt.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert!(log.lines().all(|l| !l.contains("l_rps")));
}

#[test]
fn mismatched_vocabulary_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let raw = raw_corpus(dir.path(), 4);
    let data = prepare(dir.path(), &raw, "prep");
    let ckpt = dir.path().join("ckpt");
    assert!(train(&data, &ckpt, "0", &[]).status.success());
    let other_raw = dir.path().join("other.jsonl");
    let spec = ToySpec {
        examples: 3,
        seed: 99,
        words: 60,
        ..ToySpec::default()
    };
    write_examples(&other_raw, &toy_corpus(&spec)).unwrap();
    let other = prepare(dir.path(), &other_raw, "other");
    let o = case(&["eval", "--checkpoint", p(&ckpt), "--data", p(&other)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("refusing"), "{}", stderr(&o));
}

#[test]
fn divergence_exits_with_three_and_keeps_last_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let raw = raw_corpus(dir.path(), 4);
    let data = prepare(dir.path(), &raw, "prep");
    let ckpt = dir.path().join("ckpt");
    let o = train(
        &data,
        &ckpt,
        "20",
        &["--peak-lr", "1e300", "--clip-norm", "1e300", "--checkpoint-every", "1"],
    );
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"), "{}", stderr(&o));
    let step: Value = serde_json::from_str(&fs::read_to_string(ckpt.join("step.json")).unwrap()).unwrap();
    assert!(step["step"].as_u64().unwrap() < 20);
    let o = case(&["eval", "--checkpoint", p(&ckpt), "--data", p(&data), "--weights", "ema"]);
    assert!(o.status.success(), "retained checkpoint should load: {}", stderr(&o));
}
