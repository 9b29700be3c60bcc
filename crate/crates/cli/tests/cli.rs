mod common;

use common::{ok, run, write_demo, write_jsonl};
use rsvlm::model::Model;
use rsvlm::semantic_store::SemanticDatabase;
use serde_json::{json, Value};

fn parse(line: &str) -> Value {
    serde_json::from_str(line.trim()).unwrap()
}

#[test]
fn inspect_paper_profile() {
    let dir = tempfile::tempdir().unwrap();
    let v = parse(&ok(dir.path(), &["--profile", "paper", "inspect"]));
    assert_eq!(v["prompt_rows"], 432);
    assert_eq!(v["parameters"]["per_expert"], 3_670_016);
    assert_eq!(v["parameters"]["moe_expert"], 203_685_888u64);
}

#[test]
fn retrieval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_demo(d, 1);
    let summary = parse(&ok(d, &["--config", "fast.json", "train-retriever", "--input", "pairs.jsonl", "--out", "enc.rsde"]));
    assert_eq!(summary["pairs"], 32);
    assert_eq!(summary["epochs"], 40);

    let built = parse(&ok(d, &["build-db", "--input", "texts.jsonl", "--encoder", "enc.rsde", "--out", "db.rsdb"]));
    assert_eq!(built, json!({"count": 32, "dim": 32}));
    let db = SemanticDatabase::load(d.join("db.rsdb")).unwrap();
    assert_eq!(db.records()[5].text, "sparse airport");

    let hits = ok(d, &["retrieve", "--db", "db.rsdb", "--encoder", "enc.rsde", "--image", "query.json", "--k", "3"]);
    let hits: Vec<Value> = hits.lines().map(parse).collect();
    assert_eq!(hits.len(), 3);
    assert_eq!(hits[0]["rank"], 1);
    let scores: Vec<f64> = hits.iter().map(|h| h["score"].as_f64().unwrap()).collect();
    assert!(scores.windows(2).all(|w| w[0] >= w[1]));

    let none = ok(d, &["retrieve", "--db", "db.rsdb", "--encoder", "enc.rsde", "--image", "query.json", "--k", "0"]);
    assert!(none.is_empty());
}

#[test]
fn empty_database_input() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_demo(d, 2);
    ok(d, &["--config", "fast.json", "train-retriever", "--input", "pairs.jsonl", "--out", "enc.rsde"]);
    std::fs::write(d.join("empty.jsonl"), "").unwrap();
    let built = parse(&ok(d, &["build-db", "--input", "empty.jsonl", "--encoder", "enc.rsde", "--out", "db.rsdb"]));
    assert_eq!(built["count"], 0);
    let hits = ok(d, &["retrieve", "--db", "db.rsdb", "--encoder", "enc.rsde", "--image", "query.json"]);
    assert!(hits.is_empty());
}

#[test]
fn two_stage_training_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_demo(d, 3);
    let s1 = parse(&ok(
        d,
        &["--config", "fast.json", "train", "--stage", "1", "--data", "captions.jsonl", "--out", "s1.rsck", "--log", "s1.jsonl"],
    ));
    assert_eq!(s1["steps"], 2);
    assert_eq!(std::fs::read_to_string(d.join("s1.jsonl")).unwrap().lines().count(), 2);
    let s2 = parse(&ok(
        d,
        &["--config", "fast.json", "train", "--stage", "2", "--data", "instructions.jsonl", "--init", "s1.rsck", "--out", "s2.rsck"],
    ));
    assert_eq!(s2["stage"], 2);
    Model::load(d.join("s2.rsck")).unwrap();

    let report = parse(&ok(
        d,
        &[
            "--config", "fast.json", "eval", "--task", "vqa", "--data", "eval.jsonl", "--checkpoint", "s2.rsck",
            "--predictions-out", "preds.jsonl",
        ],
    ));
    assert_eq!(report["task"], "vqa");
    assert_eq!(report["count"], 4);
    let acc = report["metrics"]["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    let preds = std::fs::read_to_string(d.join("preds.jsonl")).unwrap();
    assert_eq!(preds.lines().count(), 4);
}

#[test]
fn training_with_retrieved_semantics() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_demo(d, 4);
    ok(d, &["--config", "fast.json", "train-retriever", "--input", "pairs.jsonl", "--out", "enc.rsde"]);
    ok(d, &["build-db", "--input", "texts.jsonl", "--encoder", "enc.rsde", "--out", "db.rsdb"]);
    // scene images are 12-wide while the retriever expects 16 features
    let out = run(
        d,
        &[
            "--config", "fast.json", "train", "--stage", "1", "--data", "captions.jsonl", "--out", "m.rsck", "--db", "db.rsdb",
            "--encoder", "enc.rsde",
        ],
    );
    assert!(out.status.success(), "given semantics take precedence: {}", String::from_utf8_lossy(&out.stderr));

    let stripped: String = std::fs::read_to_string(d.join("captions.jsonl"))
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("semantics");
            format!("{v}\n")
        })
        .collect();
    std::fs::write(d.join("bare.jsonl"), stripped).unwrap();
    let out = run(
        d,
        &[
            "--config", "fast.json", "train", "--stage", "1", "--data", "bare.jsonl", "--out", "m.rsck", "--db", "db.rsdb",
            "--encoder", "enc.rsde",
        ],
    );
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn eval_scores_prediction_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_jsonl(&d.join("p.jsonl"), &[json!({"id": "a", "output": "[0, 0, 1, 1]"}), json!({"id": "b", "output": "nothing"})]);
    write_jsonl(&d.join("g.jsonl"), &[json!({"id": "a", "image": [0.0], "boxes": [[0, 0, 1, 0.5]]}), json!({"id": "b", "image": [0.0], "boxes": [[0, 0, 1, 1]]})]);
    let r = parse(&ok(d, &["eval", "--task", "ground", "--predictions", "p.jsonl", "--data", "g.jsonl"]));
    assert_eq!(r["metrics"]["precision@0.5"], 0.5);
    assert_eq!(r["metrics"]["mean_iou"], 0.25);

    write_jsonl(&d.join("p.jsonl"), &[json!({"id": 1, "output": "the cat sat"})]);
    write_jsonl(&d.join("g.jsonl"), &[json!({"id": 1, "image": [0.0], "references": ["the cat sat"]})]);
    ok(d, &["eval", "--task", "caption", "--predictions", "p.jsonl", "--data", "g.jsonl", "--out", "r.json"]);
    let r: Value = serde_json::from_str(&std::fs::read_to_string(d.join("r.json")).unwrap()).unwrap();
    assert_eq!(r["metrics"]["bleu1"], 1.0);
    assert_eq!(r["metrics"]["rouge1"], 1.0);

    write_jsonl(&d.join("p.jsonl"), &[json!({"id": 1, "output": "Harbor"})]);
    write_jsonl(&d.join("g.jsonl"), &[json!({"id": 1, "image": [0.0], "label": "harbor"})]);
    let r = parse(&ok(d, &["eval", "--task", "classify", "--predictions", "p.jsonl", "--data", "g.jsonl"]));
    assert_eq!(r["metrics"]["accuracy"], 1.0);
}

#[test]
fn grad_check_passes_on_micro() {
    let dir = tempfile::tempdir().unwrap();
    let r = parse(&ok(dir.path(), &["--profile", "micro", "grad-check"]));
    assert_eq!(r["passed"], true);
    assert!(r["model"]["probes"].as_u64().unwrap() >= 200);
    assert!(r["max_relative_error"].as_f64().unwrap() < 1e-4);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_demo(d, 5);
    let code = |args: &[&str]| run(d, args).status.code();

    assert_eq!(code(&["--profile", "huge", "inspect"]), Some(2));
    assert_eq!(code(&["inspect", "--bogus"]), Some(2));
    assert_eq!(code(&["--config", "missing.json", "inspect"]), Some(2));
    std::fs::write(d.join("bad.json"), r#"{"model": {"levels": 0}, "retrieval": {"top_k": 0}}"#).unwrap();
    let out = run(d, &["--config", "bad.json", "inspect"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("levels") && err.contains("top_k"), "{err}");

    assert_eq!(code(&["--profile", "paper", "train", "--stage", "2", "--data", "instructions.jsonl", "--out", "x"]), Some(2));
    assert_eq!(code(&["retrieve", "--db", "nope.rsdb", "--encoder", "nope.rsde", "--image", "query.json"]), Some(4));
    std::fs::write(d.join("broken.jsonl"), "{\"image\": [1.0], \"text\": \"a\"}\nnot json\n").unwrap();
    let out = run(d, &["--config", "fast.json", "train-retriever", "--input", "broken.jsonl", "--out", "e.rsde"]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("broken.jsonl:2"));
    std::fs::write(d.join("garbage.rsck"), b"RSCK\x07\x00").unwrap();
    assert_eq!(code(&["eval", "--task", "vqa", "--data", "eval.jsonl", "--checkpoint", "garbage.rsck"]), Some(4));
    assert_eq!(code(&["eval", "--task", "vqa", "--data", "eval.jsonl"]), Some(2));
    assert_eq!(code(&["train", "--stage", "1", "--data", "instructions.jsonl", "--out", "x.rsck"]), Some(4));
}
