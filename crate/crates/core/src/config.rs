//! Run configuration: a named profile plus JSON overrides.
//!
//! A config file is a JSON object. `profile` picks the base values
//! (`toy`, `micro` or `paper`); every other section is merged key by key over
//! the profile, so a file only needs the fields it changes:
//!
//! ```json
//! {"profile": "toy", "seed": 7, "model": {"d_r": 8}, "train": {"max_steps": 200}}
//! ```

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::gradcheck::GradCheckConfig;
use crate::model::{ModelConfig, Stage, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Toy,
    Micro,
    /// Full-scale dimensions for arithmetic checks; never instantiated.
    Paper,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Profile::Toy),
            "micro" => Ok(Profile::Micro),
            "paper" => Ok(Profile::Paper),
            other => Err(Error::Config(vec![format!("unknown profile {other:?}")])),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalConfig {
    pub top_k: usize,
    /// Longest semantic token sequence handed to the prompter.
    pub semantic_cap: usize,
    pub embed_dim: usize,
    /// Hash buckets of the retriever's text tokenizer.
    pub text_vocab: usize,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: Option<f64>,
    pub batch_size: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            top_k: 5,
            semantic_cap: 512,
            embed_dim: 32,
            text_vocab: 256,
            epochs: 300,
            lr: 0.1,
            momentum: Some(0.9),
            batch_size: 32,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub database: Option<PathBuf>,
    pub retriever: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    pub model: ModelConfig,
    pub retrieval: RetrievalConfig,
    pub train: TrainConfig,
    pub gradcheck: GradCheckConfig,
    /// Longest generated response during evaluation.
    pub max_new_tokens: usize,
    pub paths: Paths,
}

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let model = match profile {
            Profile::Toy => ModelConfig::toy(),
            Profile::Micro => ModelConfig::micro(),
            Profile::Paper => ModelConfig::paper(),
        };
        let mut train = TrainConfig::new(Stage::Instruction, 3e-3);
        train.max_steps = Some(300);
        train.batch_size = 16;
        Self {
            profile,
            seed: 0,
            model,
            retrieval: RetrievalConfig::default(),
            train,
            gradcheck: GradCheckConfig::default(),
            max_new_tokens: 24,
            paths: Paths::default(),
        }
    }

    /// Parses a config document, merging it over its profile.
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: Value = serde_json::from_str(text).map_err(|e| Error::Config(vec![format!("config is not valid JSON: {e}")]))?;
        let Value::Object(doc) = doc else {
            return Err(Error::Config(vec!["config must be a JSON object".into()]));
        };
        let profile = match doc.get("profile") {
            None => Profile::Toy,
            Some(Value::String(s)) => s.parse()?,
            Some(other) => return Err(Error::Config(vec![format!("profile must be a string, got {other}")])),
        };
        let mut base = serde_json::to_value(Self::for_profile(profile))?;
        merge(&mut base, Value::Object(doc));
        serde_json::from_value(base).map_err(|e| Error::Config(vec![format!("config: {e}")]))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    /// Every violated constraint, not just the first.
    pub fn validate(&self) -> Vec<String> {
        let mut errs: Vec<String> = self.model.validate().into_iter().map(|e| format!("model: {e}")).collect();
        let r = &self.retrieval;
        if r.top_k == 0 {
            errs.push("retrieval: top_k must be >= 1".into());
        }
        if r.embed_dim == 0 || r.text_vocab == 0 {
            errs.push("retrieval: embed_dim and text_vocab must be >= 1".into());
        }
        if r.batch_size < 2 {
            errs.push("retrieval: batch_size must be >= 2".into());
        }
        if !(r.lr >= 0.0 && r.lr.is_finite()) {
            errs.push("retrieval: lr must be finite and >= 0".into());
        }
        errs.extend(self.train.validate().into_iter().map(|e| format!("train: {e}")));
        let g = &self.gradcheck;
        if g.probes == 0 || !(g.eps > 0.0) {
            errs.push("gradcheck: probes must be >= 1 and eps > 0".into());
        }
        errs
    }

    pub fn validated(self) -> Result<Self> {
        let errs = self.validate();
        if errs.is_empty() {
            Ok(self)
        } else {
            Err(Error::Config(errs))
        }
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
