use std::path::Path;
use std::process::{Command, Output};

use mfkit::metadata::shard::load_records;

fn mfkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mfkit"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn mfkit")
}

fn ok(args: &[&str]) -> Output {
    let out = mfkit(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn extract_on_demo_song_finds_120_bpm_c_major() {
    let dir = tempfile::tempdir().unwrap();
    let demo = dir.path().join("demo");
    ok(&["demo-corpus", "--out-dir", s(&demo)]);
    let out = dir.path().join("song.jsonl");
    ok(&["extract", "--in", s(&demo.join("song_120_c_major.wav")), "--out", s(&out)]);
    let text = std::fs::read_to_string(&out).unwrap();
    let row: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    let bpm = row["metadata"]["bpm"].as_f64().unwrap();
    assert!((bpm - 120.0).abs() <= 2.0, "bpm {bpm}");
    assert_eq!(row["metadata"]["key"], "C major");
}

#[test]
fn perfect_qa_answer_scores_two() {
    let dir = tempfile::tempdir().unwrap();
    let demo = dir.path().join("demo");
    let job = dir.path().join("job");
    ok(&["demo-corpus", "--out-dir", s(&demo)]);
    ok(&["pipeline", "--corpus", s(&demo.join("corpus.json")), "--out-dir", s(&job), "-s", "stages=synthesize,extract,create"]);
    let records = load_records(&job.join("create")).unwrap();
    let qa = records.iter().find(|r| r.kind.is_qa()).expect("a QA record");
    let answer = &qa.target;
    let pred = serde_json::json!({
        "record_id": qa.record_id,
        "output": format!("<think>Listening closely.</think><answer>{answer}</answer>"),
    });
    let pred_path = dir.path().join("pred.jsonl");
    std::fs::write(&pred_path, format!("{pred}\n")).unwrap();
    let out = ok(&["score", "--pred", s(&pred_path), "--data", s(&job.join("create"))]);
    let row: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(row["format"], 1);
    assert_eq!(row["accuracy"], 1);
    assert_eq!(row["total"].as_f64(), Some(2.0));
}

#[test]
fn train_grpo_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        ok(&["train-grpo", "--seed", "5", "--out-dir", s(&out), "-s", "iterations=6", "-s", "warmup_steps=20", "-s", "prompts_per_step=8"]);
        (std::fs::read(out.join("metrics.jsonl")).unwrap(), std::fs::read(out.join("policy.bin")).unwrap())
    };
    let a = run("a");
    let b = run("b");
    assert_eq!(a, b);
    assert_eq!(String::from_utf8(a.0).unwrap().lines().count(), 6);
}

#[test]
fn config_file_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("job.conf");
    std::fs::write(&conf, "instances = 2\nseed = 9\n").unwrap();
    let out = ok(&["check-gradients", "--config", s(&conf), "--seed", "11"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let ids: Vec<u64> = text
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["instance"].as_u64().unwrap())
        .collect();
    assert_eq!(ids, [11, 12]);
}

#[test]
fn unknown_key_is_a_usage_error() {
    let out = mfkit(&["check-gradients", "-s", "nonsense=1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nonsense"));
    // --in is not declared for score
    assert_eq!(mfkit(&["score", "--in", "x"]).status.code(), Some(2));
    assert_eq!(mfkit(&["no-such-command"]).status.code(), Some(2));
}

#[test]
fn runtime_failures_name_their_class() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.wav");
    std::fs::write(&bad, b"not a wav").unwrap();
    let out = mfkit(&["extract", "--in", s(&bad), "--out", s(&dir.path().join("o.jsonl"))]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error["), "{err}");
    let missing = mfkit(&["extract", "--in", s(&dir.path().join("missing.wav")), "--out", "o"]);
    assert!(String::from_utf8_lossy(&missing.stderr).contains("error[IoError]"));
}

#[test]
fn key_reference_page_is_current() {
    let out = ok(&["keys"]);
    let page = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/config-keys.md");
    let committed = std::fs::read_to_string(&page).unwrap();
    assert_eq!(String::from_utf8(out.stdout).unwrap(), committed, "regenerate with `mfkit keys > docs/config-keys.md`");
}
