//! `rsvlm`: database building, retriever training, retrieval, model
//! training, evaluation and gradient checks.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 numeric failure,
//! 4 I/O or input-format error.

mod data;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use rsvlm::config::{Profile, RunConfig};
use rsvlm::dual_encoder::{recall_at_1, ContrastivePair, DualEncoder, DualEncoderDims, RetrieverTrainConfig};
use rsvlm::gradcheck::{check_dual_encoder, check_model, micro_examples};
use rsvlm::metrics::{evaluate, GroundTruth, Prediction, Task};
use rsvlm::model::{train_stage1, train_stage2, Example, Model, Stage};
use rsvlm::semantic_store::SemanticDatabase;
use rsvlm::synthetic::{mean_rows, CAPTION_QUERY};
use rsvlm::tokenizer::{decode_bytes, hash_words, BYTE_VOCAB};
use rsvlm::{Error, Matrix};

use data::{base_dir, parse_image, read_jsonl, write_jsonl, PairLine, SampleLine, TextLine};

/// Gradient checks fail above this relative error.
const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "rsvlm", version, about = "Retrieval-augmented toy vision-language model")]
struct Cli {
    /// JSON run configuration, merged over its profile.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Profile used when no config file is given (toy, micro, paper).
    #[arg(long, global = true)]
    profile: Option<String>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Embed texts with a retriever and store them in a database file.
    BuildDb {
        /// JSONL of {"text": ...}.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Retriever checkpoint (RSDE).
        #[arg(long)]
        encoder: Option<PathBuf>,
    },
    /// Contrastively train the image/text retriever.
    TrainRetriever {
        /// JSONL of {"image": ..., "text": ...}.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Top-k descriptions for one image.
    Retrieve {
        #[arg(long)]
        db: Option<PathBuf>,
        #[arg(long)]
        encoder: Option<PathBuf>,
        /// JSON file with the image (feature vector or patch matrix).
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Train the model: stage 1 aligns, stage 2 instruction-tunes.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output checkpoint (RSCK).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Checkpoint to start from instead of a fresh model.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        db: Option<PathBuf>,
        #[arg(long)]
        encoder: Option<PathBuf>,
        /// Per-step losses as JSONL.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Score predictions, or generate them from a checkpoint first.
    Eval {
        #[arg(long, value_parser = ["classify", "vqa", "ground", "caption"])]
        task: String,
        /// Existing predictions JSONL ({"id", "output"}).
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Ground-truth JSONL; with --checkpoint, the evaluation samples.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        db: Option<PathBuf>,
        #[arg(long)]
        encoder: Option<PathBuf>,
        /// Where generated predictions are written.
        #[arg(long)]
        predictions_out: Option<PathBuf>,
        /// Metric report (JSON); printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic gradients with central finite differences.
    GradCheck {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parameter arithmetic and prompt shape of the configured model.
    Inspect,
}

fn config_error(msg: impl Into<String>) -> Error {
    Error::Config(vec![msg.into()])
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Numeric(_) => 3,
        _ => 4,
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match (&cli.config, &cli.profile) {
        (Some(_), Some(_)) => return Err(config_error("use either --config or --profile")),
        (Some(path), None) => RunConfig::load(path).map_err(|e| match e {
            Error::Io(io) => Error::Config(vec![format!("{}: {io}", path.display())]),
            other => other,
        })?,
        (None, Some(p)) => RunConfig::for_profile(p.parse()?),
        (None, None) => RunConfig::for_profile(Profile::Toy),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.train.seed = cfg.seed;
    cfg.gradcheck.seed = cfg.seed;
    cfg.validated()
}

fn pick(flag: &Option<PathBuf>, fallback: &Option<PathBuf>, name: &str) -> Result<PathBuf, Error> {
    flag.clone()
        .or_else(|| fallback.clone())
        .ok_or_else(|| config_error(format!("missing --{name} (or paths.{name} in the config)")))
}

fn print_json(v: &impl Serialize) -> Result<(), Error> {
    println!("{}", serde_json::to_string(v)?);
    Ok(())
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<(), Error> {
    let mut text = serde_json::to_string_pretty(v)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn refuse_paper(cfg: &RunConfig) -> Result<(), Error> {
    if cfg.profile == Profile::Paper {
        return Err(config_error(
            "the `paper` profile is for arithmetic only (inspect); it is too large to instantiate",
        ));
    }
    Ok(())
}

fn retriever_dims(cfg: &RunConfig, d_img_raw: usize) -> DualEncoderDims {
    DualEncoderDims {
        d_img_raw,
        d_e: cfg.retrieval.embed_dim,
        vocab: cfg.retrieval.text_vocab,
    }
}

fn cmd_build_db(cfg: &RunConfig, input: &Path, out: &Path, encoder: &Path) -> Result<(), Error> {
    let enc = DualEncoder::load(encoder)?;
    let lines: Vec<TextLine> = read_jsonl(input)?;
    let mut db = SemanticDatabase::new(enc.dims().d_e);
    for (i, line) in lines.iter().enumerate() {
        let tokens = hash_words(&line.text, enc.dims().vocab);
        let emb = enc
            .encode_text(&tokens)
            .map_err(|e| Error::InvalidInput(format!("{} record {}: {e}", input.display(), i + 1)))?;
        db.ingest(&line.text, &emb)?;
    }
    db.save(out)?;
    let _ = cfg;
    print_json(&json!({"count": db.len(), "dim": db.dim()}))
}

fn cmd_train_retriever(cfg: &RunConfig, input: &Path, out: &Path) -> Result<(), Error> {
    let lines: Vec<PairLine> = read_jsonl(input)?;
    let base = base_dir(input);
    let mut pairs = Vec::with_capacity(lines.len());
    for line in &lines {
        let features = mean_rows(&parse_image(&line.image, &base)?);
        pairs.push(ContrastivePair::from_text(features, &line.text, cfg.retrieval.text_vocab));
    }
    let d_img_raw = pairs.first().map_or(0, |p| p.image_features.len());
    if pairs.iter().any(|p| p.image_features.len() != d_img_raw) {
        return Err(Error::InvalidInput("images have different feature widths".into()));
    }
    let r = &cfg.retrieval;
    let rc = RetrieverTrainConfig {
        dims: retriever_dims(cfg, d_img_raw),
        epochs: r.epochs,
        lr: r.lr,
        momentum: r.momentum,
        batch_size: r.batch_size,
        seed: cfg.seed,
    };
    let (enc, log) = rsvlm::dual_encoder::train_retriever(&pairs, &rc)?;
    enc.save(out)?;
    print_json(&json!({
        "pairs": pairs.len(),
        "epochs": log.epoch_losses.len(),
        "final_loss": log.epoch_losses.last(),
        "recall_at_1": recall_at_1(&enc, &pairs)?,
        "temperature": enc.temperature(),
    }))
}

struct Retrieval {
    db: SemanticDatabase,
    enc: DualEncoder,
}

impl Retrieval {
    fn open(db: &Path, enc: &Path) -> Result<Self, Error> {
        Ok(Self {
            db: SemanticDatabase::load(db)?,
            enc: DualEncoder::load(enc)?,
        })
    }

    fn texts(&self, image: &Matrix, k: usize) -> Result<Vec<String>, Error> {
        let q = self.enc.encode_image(&mean_rows(image))?;
        let hits = self.db.retrieve_top_k(&q, k)?;
        Ok(hits
            .iter()
            .filter_map(|h| self.db.get(h.id).map(|r| r.text.clone()))
            .collect())
    }
}

fn optional_retrieval(db: &Option<PathBuf>, enc: &Option<PathBuf>, cfg: &RunConfig) -> Result<Option<Retrieval>, Error> {
    let db = db.clone().or_else(|| cfg.paths.database.clone());
    let enc = enc.clone().or_else(|| cfg.paths.retriever.clone());
    match (db, enc) {
        (Some(d), Some(e)) => Ok(Some(Retrieval::open(&d, &e)?)),
        (None, None) => Ok(None),
        _ => Err(config_error("--db and --encoder must be given together")),
    }
}

fn cmd_retrieve(cfg: &RunConfig, db: &Path, encoder: &Path, image: &Path, k: usize) -> Result<(), Error> {
    let r = Retrieval::open(db, encoder)?;
    let text = std::fs::read_to_string(image)?;
    let v: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::InvalidInput(format!("{}: {e}", image.display())))?;
    let m = parse_image(&v, &base_dir(image))?;
    let q = r.enc.encode_image(&mean_rows(&m))?;
    for (rank, hit) in r.db.retrieve_top_k(&q, k)?.iter().enumerate() {
        let text = r.db.get(hit.id).map(|rec| rec.text.as_str()).unwrap_or_default();
        print_json(&json!({"rank": rank + 1, "id": hit.id, "score": hit.score, "text": text}))?;
    }
    let _ = cfg;
    Ok(())
}

fn byte_vocab_check(cfg: &RunConfig) -> Result<(), Error> {
    if cfg.model.vocab != BYTE_VOCAB {
        return Err(config_error(format!(
            "text data needs the byte vocabulary ({BYTE_VOCAB}); model.vocab is {}",
            cfg.model.vocab
        )));
    }
    Ok(())
}

/// Builds a tokenized example; `semantics` from the line win over retrieval.
fn to_example(
    cfg: &RunConfig,
    line: &SampleLine,
    base: &Path,
    retrieval: Option<&Retrieval>,
    query: &str,
    response: &str,
) -> Result<Example, Error> {
    let image = parse_image(&line.image, base)?;
    let semantics = match (&line.semantics, retrieval) {
        (Some(s), _) => s.clone(),
        (None, Some(r)) => r.texts(&image, cfg.retrieval.top_k)?,
        (None, None) => Vec::new(),
    };
    Ok(Example::from_text(image, &semantics, query, response, cfg.retrieval.semantic_cap))
}

fn cmd_train(cfg: &RunConfig, stage: u8, data: &Path, out: &Path, init: Option<&Path>, retrieval: Option<Retrieval>, log_path: Option<&Path>) -> Result<(), Error> {
    refuse_paper(cfg)?;
    byte_vocab_check(cfg)?;
    let lines: Vec<SampleLine> = read_jsonl(data)?;
    let base = base_dir(data);
    let mut examples = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        let at = |what: &str| Error::InvalidInput(format!("{}:{}: missing {what}", data.display(), i + 1));
        let ex = if stage == 1 {
            let caption = line.caption.as_deref().ok_or_else(|| at("caption"))?;
            to_example(cfg, line, &base, retrieval.as_ref(), CAPTION_QUERY, caption)?
        } else {
            let query = line.query.as_deref().ok_or_else(|| at("query"))?;
            let response = line.response.as_deref().ok_or_else(|| at("response"))?;
            to_example(cfg, line, &base, retrieval.as_ref(), query, response)?
        };
        examples.push(ex);
    }
    let mut model = match init {
        Some(p) => {
            let m = Model::load(p)?;
            if m.cfg != cfg.model {
                return Err(config_error("checkpoint architecture differs from the configured model"));
            }
            m
        }
        None => Model::new(cfg.model.clone(), cfg.seed)?,
    };
    let mut tc = cfg.train.clone();
    let log = if stage == 1 {
        tc.stage = Stage::Alignment;
        train_stage1(&mut model, &examples, &tc)?
    } else {
        tc.stage = Stage::Instruction;
        train_stage2(&mut model, &examples, &tc)?
    };
    model.save(out)?;
    if let Some(p) = log_path {
        let rows: Vec<_> = log
            .step_losses
            .iter()
            .enumerate()
            .map(|(s, l)| json!({"step": s, "loss": l}))
            .collect();
        write_jsonl(p, &rows)?;
    }
    print_json(&json!({
        "stage": stage,
        "examples": examples.len(),
        "steps": log.steps(),
        "first_loss": log.step_losses.first(),
        "final_loss": log.step_losses.last(),
    }))
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    cfg: &RunConfig,
    task: Task,
    predictions: Option<&Path>,
    data: &Path,
    checkpoint: Option<&Path>,
    retrieval: Option<Retrieval>,
    predictions_out: Option<&Path>,
    out: Option<&Path>,
) -> Result<(), Error> {
    let lines: Vec<SampleLine> = read_jsonl(data)?;
    let truth: Vec<GroundTruth> = lines
        .iter()
        .enumerate()
        .map(|(i, l)| GroundTruth {
            id: l.id.clone().unwrap_or_else(|| json!(i)),
            label: l.label.clone(),
            boxes: l.boxes.clone(),
            references: l.references.clone(),
        })
        .collect();
    let preds: Vec<Prediction> = match (predictions, checkpoint) {
        (Some(p), None) => read_jsonl(p)?,
        (None, Some(c)) => {
            byte_vocab_check(cfg)?;
            let model = Model::load(c)?;
            let base = base_dir(data);
            let mut preds = Vec::with_capacity(lines.len());
            for (line, gt) in lines.iter().zip(&truth) {
                let query = line.query.as_deref().unwrap_or(CAPTION_QUERY);
                let ex = to_example(cfg, line, &base, retrieval.as_ref(), query, "")?;
                let ids = model.generate(&ex.image, &ex.semantic_ids, &ex.query_ids, cfg.max_new_tokens)?;
                preds.push(Prediction {
                    id: gt.id.clone(),
                    output: decode_bytes(&ids),
                });
            }
            if let Some(p) = predictions_out {
                write_jsonl(p, &preds)?;
            }
            preds
        }
        _ => return Err(config_error("give exactly one of --predictions or --checkpoint")),
    };
    let report = evaluate(task, &preds, &truth)?;
    match out {
        Some(p) => write_json(p, &report)?,
        None => print_json(&report)?,
    }
    Ok(())
}

fn cmd_grad_check(cfg: &RunConfig, out: Option<&Path>) -> Result<(), Error> {
    refuse_paper(cfg)?;
    let model = Model::new(cfg.model.clone(), cfg.seed)?;
    let examples = micro_examples(&model, cfg.seed);
    let model_report = check_model(&model, &examples, &cfg.gradcheck)?;

    let records = rsvlm::synthetic::retrieval_corpus(16, cfg.seed);
    let pairs = rsvlm::synthetic::retrieval_pairs(&records[..6], cfg.retrieval.text_vocab);
    let enc = DualEncoder::new(retriever_dims(cfg, 16), cfg.seed)?;
    let retriever_report = check_dual_encoder(&enc, &pairs, &cfg.gradcheck)?;

    let worst = model_report.max_relative_error.max(retriever_report.max_relative_error);
    let passed = worst <= GRAD_TOLERANCE;
    let report = json!({
        "model": model_report,
        "retriever": retriever_report,
        "max_relative_error": worst,
        "tolerance": GRAD_TOLERANCE,
        "passed": passed,
    });
    match out {
        Some(p) => write_json(p, &report)?,
        None => print_json(&report)?,
    }
    if passed {
        Ok(())
    } else {
        Err(Error::Numeric(format!("max relative error {worst:e} exceeds {GRAD_TOLERANCE:e}")))
    }
}

fn cmd_inspect(cfg: &RunConfig) -> Result<(), Error> {
    let m = &cfg.model;
    print_json(&json!({
        "profile": cfg.profile,
        "prompt_rows": m.prompt_rows(),
        "prompt_shape": [m.prompt_rows(), m.d_h],
        "tap_indices": m.tap_indices(),
        "expert_blocks": m.expert_block_indices(),
        "parameters": m.parameter_counts(),
        "top_k": cfg.retrieval.top_k,
    }))
}

fn run(cli: &Cli) -> Result<(), Error> {
    let cfg = load_config(cli)?;
    let paths = &cfg.paths;
    match &cli.command {
        Command::BuildDb { input, out, encoder } => {
            cmd_build_db(&cfg, input, out, &pick(encoder, &paths.retriever, "encoder")?)
        }
        Command::TrainRetriever { input, out } => cmd_train_retriever(&cfg, input, out),
        Command::Retrieve { db, encoder, image, k } => cmd_retrieve(
            &cfg,
            &pick(db, &paths.database, "db")?,
            &pick(encoder, &paths.retriever, "encoder")?,
            image,
            k.unwrap_or(cfg.retrieval.top_k),
        ),
        Command::Train { stage, data, out, init, db, encoder, log } => {
            let data = pick(data, &paths.data, "data")?;
            let out = pick(out, &paths.checkpoint, "out")?;
            let retrieval = optional_retrieval(db, encoder, &cfg)?;
            cmd_train(&cfg, *stage, &data, &out, init.as_deref(), retrieval, log.as_deref())
        }
        Command::Eval { task, predictions, data, checkpoint, db, encoder, predictions_out, out } => {
            let task: Task = task.parse().map_err(|e: Error| config_error(e.to_string()))?;
            let data = pick(data, &paths.data, "data")?;
            let retrieval = optional_retrieval(db, encoder, &cfg)?;
            cmd_eval(
                &cfg,
                task,
                predictions.as_deref(),
                &data,
                checkpoint.as_deref(),
                retrieval,
                predictions_out.as_deref(),
                out.as_deref().or(paths.output.as_deref()),
            )
        }
        Command::GradCheck { out } => cmd_grad_check(&cfg, out.as_deref().or(paths.output.as_deref())),
        Command::Inspect => cmd_inspect(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                Error::Config(errs) => {
                    for msg in errs {
                        eprintln!("config error: {msg}");
                    }
                }
                other => eprintln!("error: {other}"),
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
