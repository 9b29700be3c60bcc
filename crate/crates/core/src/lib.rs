//! A small retrieval-augmented vision-language model in plain Rust.
//!
//! Images pass through a multi-level visual encoder; a prompter condenses the
//! user query, retrieved scene descriptions and every visual level into a
//! fixed set of prompt tokens; a decoder-only language model with
//! segment-routed low-rank experts produces the answer. Everything runs on
//! `f64` matrices with a tape-based reverse-mode autodiff ([`Graph`]).
//!
//! Persistent formats: `RSDB` (semantic database, [`semantic_store`]),
//! `RSDE` (retriever, [`dual_encoder`]) and `RSCK` (model checkpoint,
//! [`model`]).

pub mod config;
pub mod dual_encoder;
pub mod error;
pub mod expert_layer;
pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod numerics;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod prompter;
pub mod semantic_store;
pub mod synthetic;
pub mod tokenizer;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use numerics::{GradReport, Matrix, Rng};
pub use params::{Group, ParamId, ParamSet};
