#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rsvlm::synthetic::{instruction_text, retrieval_corpus, scene_semantics, scenes};
use serde_json::{json, Value};

pub const PATCH_DIM: usize = 12;
pub const PATCHES: usize = 4;

pub fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rsvlm"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn rsvlm")
}

pub fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

pub fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    stdout(&out)
}

pub fn write_jsonl(path: &Path, rows: &[Value]) {
    let text: String = rows.iter().map(|r| format!("{r}\n")).collect();
    std::fs::write(path, text).unwrap();
}

fn image_json(m: &rsvlm::Matrix) -> Value {
    json!((0..m.rows()).map(|r| m.row(r).to_vec()).collect::<Vec<_>>())
}

/// Writes the demo inputs into `dir`:
/// `pairs.jsonl` (retriever training), `texts.jsonl` (database),
/// `query.json` (one retrieval image), `captions.jsonl`,
/// `instructions.jsonl` and `eval.jsonl` (toy model samples), and
/// `fast.json`, a config with short training runs.
pub fn write_demo(dir: &Path, seed: u64) -> PathBuf {
    let records = retrieval_corpus(16, seed);
    let pairs: Vec<Value> = records.iter().map(|r| json!({"image": r.features, "text": r.text})).collect();
    write_jsonl(&dir.join("pairs.jsonl"), &pairs);
    let texts: Vec<Value> = records.iter().map(|r| json!({"text": r.text})).collect();
    write_jsonl(&dir.join("texts.jsonl"), &texts);
    std::fs::write(dir.join("query.json"), json!(records[5].features).to_string()).unwrap();

    let scenes = scenes(PATCH_DIM, PATCHES, 8, seed);
    let captions: Vec<Value> = scenes
        .iter()
        .map(|s| json!({"image": image_json(&s.image), "caption": s.caption(), "semantics": scene_semantics(s)}))
        .collect();
    write_jsonl(&dir.join("captions.jsonl"), &captions);
    let instructions: Vec<Value> = scenes
        .iter()
        .map(|s| {
            let (q, r) = instruction_text(s);
            json!({"image": image_json(&s.image), "query": q, "response": r, "semantics": scene_semantics(s)})
        })
        .collect();
    write_jsonl(&dir.join("instructions.jsonl"), &instructions);
    let eval: Vec<Value> = scenes
        .iter()
        .enumerate()
        .take(4)
        .map(|(i, s)| {
            let (q, r) = instruction_text(s);
            json!({"id": i, "image": image_json(&s.image), "query": q, "label": r, "semantics": scene_semantics(s)})
        })
        .collect();
    write_jsonl(&dir.join("eval.jsonl"), &eval);

    let cfg = json!({
        "profile": "toy",
        "seed": seed,
        "retrieval": {"epochs": 40},
        "train": {"max_steps": 2, "batch_size": 4},
        "max_new_tokens": 4
    });
    let path = dir.join("fast.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    path
}
