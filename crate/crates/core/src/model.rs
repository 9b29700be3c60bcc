//! End-to-end toy vision-language model.
//!
//! Patches go through a small transformer encoder whose hidden states are
//! tapped at `L` depths. The prompter turns the user query, retrieved
//! semantic tokens and the tapped levels into `N_a·L` prompt tokens. The
//! decoder-only LM then reads
//!
//! ```text
//! [projected image tokens ; prompt level 1 … L ; BOS query SEP response EOS]
//! ```
//!
//! with causal attention everywhere. Every `expert_stride`-th block carries
//! segment-routed experts next to its FFN. Token ids are model-level; the
//! last three ids of the vocabulary are BOS, EOS and SEP.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expert_layer::{
    expert_parameter_count, moe_expert_parameter_count, validate_segments, ExpertLayerParams, Segment,
    SegmentedTokens,
};
use crate::graph::{Graph, Var};
use crate::nn::{Attention, GatedFfn, LayerNorm, Linear, Mlp};
use crate::numerics::{Matrix, Rng};
use crate::optim::AdamW;
use crate::params::{Group, ParamId, ParamSet};
use crate::prompter::{Prompter, PrompterConfig};
use crate::semantic_store::ByteCursor;

const EMBED_INIT_STD: f64 = 1.0;
const POS_INIT_STD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub patch_dim: usize,
    pub max_patches: usize,
    pub d_v: usize,
    pub visual_layers: usize,
    pub visual_heads: usize,
    pub visual_mlp: usize,
    pub levels: usize,
    pub num_agg_tokens: usize,
    pub prompter_heads: usize,
    pub d_h: usize,
    pub lm_layers: usize,
    pub lm_heads: usize,
    pub d_i: usize,
    pub d_r: usize,
    pub expert_stride: usize,
    pub vocab: usize,
    pub max_seq: usize,
}

impl ModelConfig {
    /// Desk-scale configuration with byte-level vocabulary.
    pub fn toy() -> Self {
        Self {
            patch_dim: 12,
            max_patches: 16,
            d_v: 16,
            visual_layers: 3,
            visual_heads: 2,
            visual_mlp: 32,
            levels: 3,
            num_agg_tokens: 4,
            prompter_heads: 2,
            d_h: 64,
            lm_layers: 4,
            lm_heads: 2,
            d_i: 256,
            d_r: 16,
            expert_stride: 4,
            vocab: crate::tokenizer::BYTE_VOCAB,
            max_seq: 96,
        }
    }

    /// Smallest configuration exercising every component, for gradient checks.
    pub fn micro() -> Self {
        Self {
            patch_dim: 6,
            max_patches: 4,
            d_v: 8,
            visual_layers: 2,
            visual_heads: 2,
            visual_mlp: 8,
            levels: 2,
            num_agg_tokens: 2,
            prompter_heads: 2,
            d_h: 16,
            lm_layers: 2,
            lm_heads: 2,
            d_i: 24,
            d_r: 4,
            expert_stride: 2,
            vocab: 11,
            max_seq: 24,
        }
    }

    /// Full-scale dimensions. Only used for shape and parameter arithmetic;
    /// instantiating it allocates billions of weights.
    pub fn paper() -> Self {
        Self {
            patch_dim: 588,
            max_patches: 576,
            d_v: 1024,
            visual_layers: 24,
            visual_heads: 16,
            visual_mlp: 4096,
            levels: 3,
            num_agg_tokens: 144,
            prompter_heads: 8,
            d_h: 3584,
            lm_layers: 28,
            lm_heads: 28,
            d_i: 18944,
            d_r: 512,
            expert_stride: 4,
            vocab: crate::tokenizer::BYTE_VOCAB,
            max_seq: 4096,
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let positive = [
            ("patch_dim", self.patch_dim),
            ("max_patches", self.max_patches),
            ("d_v", self.d_v),
            ("levels", self.levels),
            ("num_agg_tokens", self.num_agg_tokens),
            ("d_h", self.d_h),
            ("lm_layers", self.lm_layers),
            ("d_i", self.d_i),
            ("d_r", self.d_r),
            ("expert_stride", self.expert_stride),
        ];
        for (name, v) in positive {
            if v == 0 {
                errs.push(format!("{name} must be >= 1"));
            }
        }
        for (name, d, h) in [
            ("visual", self.d_v, self.visual_heads),
            ("prompter", self.d_h, self.prompter_heads),
            ("lm", self.d_h, self.lm_heads),
        ] {
            if h == 0 || d % h != 0 {
                errs.push(format!("{name} width {d} is not divisible by {h} heads"));
            }
        }
        if self.d_r >= self.d_h {
            errs.push(format!("d_r ({}) must be smaller than d_h ({})", self.d_r, self.d_h));
        }
        if self.visual_layers < self.levels {
            errs.push(format!(
                "visual_layers ({}) must be at least levels ({})",
                self.visual_layers, self.levels
            ));
        }
        if self.vocab < 4 {
            errs.push("vocab must hold at least one ordinary token and three specials".into());
        }
        if self.expert_stride > self.lm_layers {
            errs.push(format!(
                "expert_stride ({}) exceeds lm_layers ({}); no block would carry experts",
                self.expert_stride, self.lm_layers
            ));
        }
        if self.max_seq <= self.prompt_rows() + 3 {
            errs.push(format!("max_seq ({}) leaves no room for text", self.max_seq));
        }
        errs
    }

    /// 1-based encoder blocks whose outputs form the visual levels:
    /// `⌊l·M/L⌋` for `l = 1..=L`.
    pub fn tap_indices(&self) -> Vec<usize> {
        (1..=self.levels)
            .map(|l| l * self.visual_layers / self.levels)
            .collect()
    }

    /// 0-based LM blocks carrying experts: every `expert_stride`-th block.
    pub fn expert_block_indices(&self) -> Vec<usize> {
        (0..self.lm_layers)
            .filter(|i| (i + 1) % self.expert_stride == 0)
            .collect()
    }

    pub fn prompt_rows(&self) -> usize {
        self.num_agg_tokens * self.levels
    }

    pub fn bos(&self) -> usize {
        self.vocab - 3
    }

    pub fn eos(&self) -> usize {
        self.vocab - 2
    }

    pub fn sep(&self) -> usize {
        self.vocab - 1
    }

    pub fn prompter_config(&self) -> PrompterConfig {
        PrompterConfig {
            num_agg_tokens: self.num_agg_tokens,
            dim: self.d_h,
            heads: self.prompter_heads,
            level_dims: vec![self.d_v; self.levels],
        }
    }

    pub fn parameter_counts(&self) -> ParameterCounts {
        let per_expert = expert_parameter_count(self.d_h, self.d_r);
        let moe = moe_expert_parameter_count(self.d_h, self.d_i);
        let blocks = self.expert_block_indices().len() as u64;
        ParameterCounts {
            per_expert,
            moe_expert: moe,
            ratio: per_expert as f64 / moe as f64,
            expert_blocks: blocks,
            total_expert: per_expert * self.levels as u64 * blocks,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterCounts {
    pub per_expert: u64,
    pub moe_expert: u64,
    pub ratio: f64,
    pub expert_blocks: u64,
    /// All expert weights in the LM (excluding gates).
    pub total_expert: u64,
}

#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub attn: Attention,
    pub mlp_norm: LayerNorm,
    pub mlp: Mlp,
}

#[derive(Clone, Debug)]
pub struct ToyVisualEncoder {
    pub patch_embed: Linear,
    pub pos: ParamId,
    pub blocks: Vec<EncoderBlock>,
    pub tap_indices: Vec<usize>,
}

impl ToyVisualEncoder {
    fn init(cfg: &ModelConfig, store: &mut ParamSet, rng: &mut Rng) -> Result<Self> {
        let grp = Group::VisualEncoder;
        let patch_embed = Linear::init(store, "visual.patch_embed", cfg.patch_dim, cfg.d_v, true, grp, rng);
        let pos = store.add("visual.pos", grp, Matrix::randn(cfg.max_patches, cfg.d_v, POS_INIT_STD, rng));
        let blocks = (0..cfg.visual_layers)
            .map(|i| {
                let name = format!("visual.block{i}");
                Ok(EncoderBlock {
                    attn: Attention::init(store, &format!("{name}.attn"), cfg.d_v, cfg.d_v, cfg.visual_heads, grp, rng)?,
                    mlp_norm: LayerNorm::init(store, &format!("{name}.mlp_norm"), cfg.d_v, grp),
                    mlp: Mlp::init(store, &format!("{name}.mlp"), (cfg.d_v, cfg.visual_mlp, cfg.d_v), grp, rng),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            patch_embed,
            pos,
            blocks,
            tap_indices: cfg.tap_indices(),
        })
    }

    /// Hidden states after each tapped block, each `N_patches × d_v`.
    pub fn encode_multilevel_graph(&self, g: &mut Graph, image: Var) -> Result<Vec<Var>> {
        let (n, _) = g.shape(image);
        let pos_table = g.param(self.pos);
        let max = g.shape(pos_table).0;
        if n == 0 || n > max {
            return Err(Error::InvalidInput(format!("image has {n} patches; expected 1..={max}")));
        }
        let x = self.patch_embed.forward(g, image)?;
        let pos_ids: Vec<usize> = (0..n).collect();
        let pos = g.gather_rows(pos_table, &pos_ids)?;
        let mut x = g.add(x, pos)?;
        let mut taps = Vec::with_capacity(self.tap_indices.len());
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.attn.self_attend(g, x, false)?;
            let y = block.mlp_norm.forward(g, x)?;
            let y = block.mlp.forward(g, y)?;
            x = g.add(x, y)?;
            if self.tap_indices.contains(&(i + 1)) {
                taps.push(x);
            }
        }
        Ok(taps)
    }

    pub fn encode_multilevel(&self, store: &ParamSet, image: &Matrix) -> Result<Vec<Matrix>> {
        let mut g = Graph::new(store);
        let x = g.constant(image.clone());
        let taps = self.encode_multilevel_graph(&mut g, x)?;
        Ok(taps.into_iter().map(|t| g.value(t).clone()).collect())
    }
}

#[derive(Clone, Debug)]
pub enum BlockFfn {
    Dense(GatedFfn),
    Experts(ExpertLayerParams),
}

#[derive(Clone, Debug)]
pub struct LmBlock {
    pub attn: Attention,
    pub ffn_norm: LayerNorm,
    pub ffn: BlockFfn,
}

#[derive(Clone, Debug)]
pub struct ToyLM {
    pub embed: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<LmBlock>,
    pub final_norm: LayerNorm,
    pub head: Linear,
}

impl ToyLM {
    fn init(cfg: &ModelConfig, store: &mut ParamSet, rng: &mut Rng) -> Result<Self> {
        let grp = Group::LanguageModel;
        let embed = store.add("lm.embed", grp, Matrix::randn(cfg.vocab, cfg.d_h, EMBED_INIT_STD, rng));
        let pos = store.add("lm.pos", grp, Matrix::randn(cfg.max_seq, cfg.d_h, POS_INIT_STD, rng));
        let expert_blocks = cfg.expert_block_indices();
        let blocks = (0..cfg.lm_layers)
            .map(|i| {
                let name = format!("lm.block{i}");
                let attn = Attention::init(store, &format!("{name}.attn"), cfg.d_h, cfg.d_h, cfg.lm_heads, grp, rng)?;
                let ffn_norm = LayerNorm::init(store, &format!("{name}.ffn_norm"), cfg.d_h, grp);
                let ffn = if expert_blocks.contains(&i) {
                    BlockFfn::Experts(ExpertLayerParams::init(
                        store,
                        &format!("{name}.moe"),
                        cfg.d_h,
                        cfg.d_r,
                        cfg.d_i,
                        cfg.levels,
                        grp,
                        rng,
                    )?)
                } else {
                    BlockFfn::Dense(GatedFfn::init(store, &format!("{name}.ffn"), cfg.d_h, cfg.d_i, grp, rng))
                };
                Ok(LmBlock { attn, ffn_norm, ffn })
            })
            .collect::<Result<Vec<_>>>()?;
        let final_norm = LayerNorm::init(store, "lm.final_norm", cfg.d_h, grp);
        let head = Linear::init(store, "lm.head", cfg.d_h, cfg.vocab, false, grp, rng);
        Ok(Self {
            embed,
            pos,
            blocks,
            final_norm,
            head,
        })
    }

    pub fn embed_graph(&self, g: &mut Graph, ids: &[usize]) -> Result<Var> {
        let table = g.param(self.embed);
        g.gather_rows(table, ids)
    }

    /// Logits `T × vocab` for an assembled sequence.
    pub fn forward_graph(&self, g: &mut Graph, x: Var, segments: &[Segment]) -> Result<Var> {
        let (t, _) = g.shape(x);
        let pos_table = g.param(self.pos);
        let max = g.shape(pos_table).0;
        if t == 0 || t > max || t != segments.len() {
            return Err(Error::InvalidInput(format!(
                "sequence of {t} rows with {} tags; the LM accepts 1..={max}",
                segments.len()
            )));
        }
        let ids: Vec<usize> = (0..t).collect();
        let pos = g.gather_rows(pos_table, &ids)?;
        let mut x = g.add(x, pos)?;
        for block in &self.blocks {
            x = block.attn.self_attend(g, x, true)?;
            let y = block.ffn_norm.forward(g, x)?;
            let y = match &block.ffn {
                BlockFfn::Dense(f) => f.forward(g, y)?,
                BlockFfn::Experts(e) => e.forward_graph(g, y, segments)?,
            };
            x = g.add(x, y)?;
        }
        let x = self.final_norm.forward(g, x)?;
        self.head.forward(g, x)
    }
}

/// Rows of `[image ; prompt ; text]` with their segment tags.
pub fn assemble_segments(image_rows: usize, num_agg_tokens: usize, levels: usize, text_rows: usize) -> Vec<Segment> {
    let mut segs = vec![Segment::Image; image_rows];
    for l in 1..=levels {
        segs.extend(std::iter::repeat_n(Segment::Semantic(l), num_agg_tokens));
    }
    segs.extend(std::iter::repeat_n(Segment::Query, text_rows));
    segs
}

fn check_assembly(image: (usize, usize), prompt: (usize, usize), text: (usize, usize), n_a: usize, levels: usize) -> Result<()> {
    if image.0 == 0 {
        return Err(Error::InvalidInput("sequence needs at least one image token".into()));
    }
    if n_a == 0 || prompt.0 != n_a * levels {
        return Err(Error::InvalidInput(format!(
            "prompt has {} rows; expected N_a·L = {}·{}",
            prompt.0, n_a, levels
        )));
    }
    if image.1 != prompt.1 || text.1 != prompt.1 {
        return Err(Error::InvalidInput(format!(
            "row widths differ: image {}, prompt {}, text {}",
            image.1, prompt.1, text.1
        )));
    }
    Ok(())
}

pub fn assemble_sequence_graph(
    g: &mut Graph,
    image_tokens: Var,
    prompt: Var,
    text: Var,
    num_agg_tokens: usize,
    levels: usize,
) -> Result<(Var, Vec<Segment>)> {
    let (i, p, t) = (g.shape(image_tokens), g.shape(prompt), g.shape(text));
    check_assembly(i, p, t, num_agg_tokens, levels)?;
    let seq = g.concat_rows(&[image_tokens, prompt, text])?;
    Ok((seq, assemble_segments(i.0, num_agg_tokens, levels, t.0)))
}

/// Stacks projected image tokens, the prompt and embedded query-side tokens.
pub fn assemble_sequence(
    image_tokens: &Matrix,
    prompt: &Matrix,
    text: &Matrix,
    num_agg_tokens: usize,
    levels: usize,
) -> Result<SegmentedTokens> {
    check_assembly(image_tokens.shape(), prompt.shape(), text.shape(), num_agg_tokens, levels)?;
    let hidden = Matrix::concat_rows(&[image_tokens, prompt, text])?;
    let segments = assemble_segments(image_tokens.rows(), num_agg_tokens, levels, text.rows());
    SegmentedTokens::new(hidden, segments, levels)
}

/// One training or inference example, already tokenized.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    /// `N_patches × patch_dim`.
    pub image: Matrix,
    pub semantic_ids: Vec<usize>,
    pub query_ids: Vec<usize>,
    pub response_ids: Vec<usize>,
}

impl Example {
    /// Byte-tokenized example for models with the byte vocabulary.
    pub fn from_text<S: AsRef<str>>(image: Matrix, semantics: &[S], query: &str, response: &str, semantic_cap: usize) -> Self {
        Self {
            image,
            semantic_ids: crate::tokenizer::join_texts(semantics, semantic_cap),
            query_ids: crate::tokenizer::encode_bytes(query),
            response_ids: crate::tokenizer::encode_bytes(response),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamSet,
    pub visual: ToyVisualEncoder,
    pub projector: Linear,
    pub prompter: Prompter,
    pub lm: ToyLM,
}

struct Forward {
    logits: Var,
    text_offset: usize,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let errs = cfg.validate();
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        let mut store = ParamSet::new();
        let mut rng = Rng::new(seed);
        let visual = ToyVisualEncoder::init(&cfg, &mut store, &mut rng)?;
        let projector = Linear::init(&mut store, "projector", cfg.d_v, cfg.d_h, true, Group::Projector, &mut rng);
        let prompter = Prompter::init(cfg.prompter_config(), &mut store, &mut rng, "prompter")?;
        let lm = ToyLM::init(&cfg, &mut store, &mut rng)?;
        Ok(Self {
            cfg,
            store,
            visual,
            projector,
            prompter,
            lm,
        })
    }

    /// `BOS query SEP response [EOS]`.
    pub fn text_ids(&self, query_ids: &[usize], response_ids: &[usize], with_eos: bool) -> Vec<usize> {
        let mut ids = Vec::with_capacity(query_ids.len() + response_ids.len() + 3);
        ids.push(self.cfg.bos());
        ids.extend_from_slice(query_ids);
        ids.push(self.cfg.sep());
        ids.extend_from_slice(response_ids);
        if with_eos {
            ids.push(self.cfg.eos());
        }
        ids
    }

    fn check_ids(&self, ids: &[usize], what: &str) -> Result<()> {
        match ids.iter().find(|&&i| i >= self.cfg.vocab) {
            Some(bad) => Err(Error::InvalidInput(format!(
                "{what} token {bad} outside vocabulary of {}",
                self.cfg.vocab
            ))),
            None => Ok(()),
        }
    }

    fn forward(&self, g: &mut Graph, image: &Matrix, semantic_ids: &[usize], query_ids: &[usize], text: &[usize]) -> Result<Forward> {
        if image.cols() != self.cfg.patch_dim {
            return Err(Error::shape("image", image.shape(), (image.rows(), self.cfg.patch_dim)));
        }
        self.check_ids(semantic_ids, "semantic")?;
        self.check_ids(query_ids, "query")?;
        self.check_ids(text, "text")?;
        let image = g.constant(image.clone());
        let levels = self.visual.encode_multilevel_graph(g, image)?;
        let last = *levels.last().expect("at least one level");
        let image_tokens = self.projector.forward(g, last)?;

        let mut user = vec![self.cfg.bos()];
        user.extend_from_slice(query_ids);
        let f_user = self.lm.embed_graph(g, &user)?;
        let sem: Vec<usize> = if semantic_ids.is_empty() {
            vec![self.cfg.sep()]
        } else {
            semantic_ids.to_vec()
        };
        let f_sem = self.lm.embed_graph(g, &sem)?;
        let prompt = self.prompter.build_prompt_graph(g, f_user, f_sem, &levels)?;

        let text_emb = self.lm.embed_graph(g, text)?;
        let (seq, segments) =
            assemble_sequence_graph(g, image_tokens, prompt, text_emb, self.cfg.num_agg_tokens, self.cfg.levels)?;
        let logits = self.lm.forward_graph(g, seq, &segments)?;
        Ok(Forward {
            logits,
            text_offset: segments.len() - text.len(),
        })
    }

    /// Mean next-token loss over the response and EOS positions.
    pub fn example_loss_graph(&self, g: &mut Graph, ex: &Example) -> Result<Var> {
        let text = self.text_ids(&ex.query_ids, &ex.response_ids, true);
        let fwd = self.forward(g, &ex.image, &ex.semantic_ids, &ex.query_ids, &text)?;
        let first = 2 + ex.query_ids.len();
        let positions: Vec<usize> = (first..text.len()).map(|j| fwd.text_offset + j - 1).collect();
        let picked = g.gather_rows(fwd.logits, &positions)?;
        g.cross_entropy(picked, &text[first..])
    }

    pub fn example_loss(&self, ex: &Example) -> Result<f64> {
        let mut g = Graph::new(&self.store);
        let loss = self.example_loss_graph(&mut g, ex)?;
        Ok(g.value(loss).get(0, 0))
    }

    pub fn loss_and_gradients(&self, ex: &Example) -> Result<(f64, Vec<Option<Matrix>>)> {
        let mut g = Graph::new(&self.store);
        let loss = self.example_loss_graph(&mut g, ex)?;
        let value = g.value(loss).get(0, 0);
        Ok((value, g.backward(loss)?.into_param_grads()))
    }

    pub fn mean_loss(&self, examples: &[Example]) -> Result<f64> {
        if examples.is_empty() {
            return Err(Error::InvalidInput("no examples".into()));
        }
        let losses = examples
            .par_iter()
            .map(|ex| self.example_loss(ex))
            .collect::<Result<Vec<_>>>()?;
        Ok(losses.iter().sum::<f64>() / losses.len() as f64)
    }

    /// Runs the LM on an already assembled sequence. `targets[t]` is the id
    /// that position `t` should predict; only query-segment positions may
    /// carry one.
    pub fn forward_lm(&self, seq: &SegmentedTokens, targets: &[Option<usize>]) -> Result<(f64, Matrix)> {
        if targets.len() != seq.len() {
            return Err(Error::InvalidInput(format!(
                "{} targets for a sequence of {}",
                targets.len(),
                seq.len()
            )));
        }
        validate_segments(&seq.segments, self.cfg.levels)?;
        let mut positions = Vec::new();
        let mut ids = Vec::new();
        for (t, target) in targets.iter().enumerate() {
            if let Some(id) = *target {
                if seq.segments[t] != Segment::Query {
                    return Err(Error::InvalidInput(format!(
                        "target at position {t} falls on a {:?} token",
                        seq.segments[t]
                    )));
                }
                positions.push(t);
                ids.push(id);
            }
        }
        if positions.is_empty() {
            return Err(Error::InvalidInput("no supervised positions".into()));
        }
        let mut g = Graph::new(&self.store);
        let x = g.constant(seq.hidden.clone());
        let logits = self.lm.forward_graph(&mut g, x, &seq.segments)?;
        let picked = g.gather_rows(logits, &positions)?;
        let loss = g.cross_entropy(picked, &ids)?;
        Ok((g.value(loss).get(0, 0), g.value(logits).clone()))
    }

    /// Embedding rows of the LM vocabulary for `ids`.
    pub fn embed(&self, ids: &[usize]) -> Result<Matrix> {
        self.check_ids(ids, "embedding")?;
        let table = self.store.get(self.lm.embed);
        let rows: Vec<&[f64]> = ids.iter().map(|&i| table.row(i)).collect();
        Matrix::from_rows(&rows)
    }

    /// The semantic-augmented prompt for one image and query.
    pub fn prompt(&self, image: &Matrix, semantic_ids: &[usize], query_ids: &[usize]) -> Result<Matrix> {
        let mut g = Graph::new(&self.store);
        let image = g.constant(image.clone());
        let levels = self.visual.encode_multilevel_graph(&mut g, image)?;
        let mut user = vec![self.cfg.bos()];
        user.extend_from_slice(query_ids);
        let f_user = self.lm.embed_graph(&mut g, &user)?;
        let sem = if semantic_ids.is_empty() { vec![self.cfg.sep()] } else { semantic_ids.to_vec() };
        let f_sem = self.lm.embed_graph(&mut g, &sem)?;
        let prompt = self.prompter.build_prompt_graph(&mut g, f_user, f_sem, &levels)?;
        Ok(g.value(prompt).clone())
    }

    /// Greedy decoding; stops at EOS (not included) or after `max_tokens`.
    pub fn generate(&self, image: &Matrix, semantic_ids: &[usize], query_ids: &[usize], max_tokens: usize) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        while out.len() < max_tokens {
            let text = self.text_ids(query_ids, &out, false);
            let mut g = Graph::new(&self.store);
            let fwd = self.forward(&mut g, image, semantic_ids, query_ids, &text)?;
            let logits = g.value(fwd.logits);
            let last = logits.row(logits.rows() - 1);
            let mut best = 0;
            for (i, &v) in last.iter().enumerate() {
                if v > last[best] {
                    best = i;
                }
            }
            if best == self.cfg.eos() {
                break;
            }
            out.push(best);
        }
        Ok(out)
    }

    /// Longest text (query plus response) that fits the LM context.
    pub fn text_capacity(&self, image_rows: usize) -> usize {
        self.cfg
            .max_seq
            .saturating_sub(image_rows + self.cfg.prompt_rows() + 3)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Alignment,
    Instruction,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentLrs {
    pub visual_encoder: f64,
    pub prompter: f64,
    pub projector: f64,
    pub language_model: f64,
}

impl ComponentLrs {
    pub fn uniform(lr: f64) -> Self {
        Self {
            visual_encoder: lr,
            prompter: lr,
            projector: lr,
            language_model: lr,
        }
    }

    fn for_group(&self, group: Group) -> f64 {
        match group {
            Group::VisualEncoder => self.visual_encoder,
            Group::Prompter => self.prompter,
            Group::Projector => self.projector,
            Group::LanguageModel => self.language_model,
            Group::Retriever => 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub seed: u64,
    pub epochs: usize,
    /// Caps the number of optimizer steps; overrides `epochs` when set.
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    pub lr: ComponentLrs,
    /// Whether the alignment stage also updates the image-token projector.
    pub train_projector: bool,
    pub weight_decay: f64,
    /// Stop once an epoch's mean loss is below this value.
    pub target_loss: Option<f64>,
    /// Worker threads for per-example gradients; results do not depend on it.
    pub threads: usize,
}

impl TrainConfig {
    pub fn new(stage: Stage, lr: f64) -> Self {
        Self {
            stage,
            seed: 0,
            epochs: 1,
            max_steps: None,
            batch_size: 8,
            lr: ComponentLrs::uniform(lr),
            train_projector: true,
            weight_decay: 0.01,
            target_loss: None,
            threads: 1,
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let lrs = [
            ("visual_encoder", self.lr.visual_encoder),
            ("prompter", self.lr.prompter),
            ("projector", self.lr.projector),
            ("language_model", self.lr.language_model),
        ];
        for (name, lr) in lrs {
            if !(lr >= 0.0 && lr.is_finite()) {
                errs.push(format!("learning rate for {name} must be finite and >= 0"));
            }
        }
        if self.batch_size == 0 {
            errs.push("batch_size must be >= 1".into());
        }
        if self.threads == 0 {
            errs.push("threads must be >= 1".into());
        }
        if !(self.weight_decay >= 0.0) {
            errs.push("weight_decay must be >= 0".into());
        }
        errs
    }

    /// Learning rate actually applied to `group` in this stage.
    pub fn effective_lr(&self, group: Group) -> f64 {
        match self.stage {
            Stage::Alignment => match group {
                Group::Prompter => self.lr.prompter,
                Group::Projector if self.train_projector => self.lr.projector,
                _ => 0.0,
            },
            Stage::Instruction => self.lr.for_group(group),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean batch loss before each optimizer step.
    pub step_losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
}

impl TrainLog {
    pub fn steps(&self) -> usize {
        self.step_losses.len()
    }
}

/// Alignment stage: only the prompter (and optionally the projector) learn.
pub fn train_stage1(model: &mut Model, pairs: &[Example], cfg: &TrainConfig) -> Result<TrainLog> {
    if cfg.stage != Stage::Alignment {
        return Err(Error::Config(vec!["stage 1 requires the alignment stage tag".into()]));
    }
    train(model, pairs, cfg)
}

/// Instruction stage: every component learns at its own rate.
pub fn train_stage2(model: &mut Model, samples: &[Example], cfg: &TrainConfig) -> Result<TrainLog> {
    if cfg.stage != Stage::Instruction {
        return Err(Error::Config(vec!["stage 2 requires the instruction stage tag".into()]));
    }
    train(model, samples, cfg)
}

fn batch_gradients(model: &Model, batch: &[&Example]) -> Result<(f64, Vec<Option<Matrix>>)> {
    let results = batch
        .par_iter()
        .map(|ex| model.loss_and_gradients(ex))
        .collect::<Result<Vec<_>>>()?;
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    let mut acc: Vec<Option<Matrix>> = vec![None; model.store.len()];
    // fixed summation order keeps results independent of scheduling
    for (loss, grads) in results {
        total += loss;
        for (slot, g) in acc.iter_mut().zip(grads) {
            if let Some(g) = g {
                match slot {
                    Some(a) => a.add_assign(&g)?,
                    None => *slot = Some(g),
                }
            }
        }
    }
    for g in acc.iter_mut().flatten() {
        *g = g.scale(scale);
    }
    Ok((total * scale, acc))
}

fn train(model: &mut Model, examples: &[Example], cfg: &TrainConfig) -> Result<TrainLog> {
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    if examples.is_empty() {
        return Err(Error::InvalidInput("no training examples".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::Config(vec![format!("thread pool: {e}")]))?;
    let mut rng = Rng::new(cfg.seed);
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut log = TrainLog::default();
    let steps_per_epoch = examples.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.max_steps.unwrap_or(cfg.epochs * steps_per_epoch);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    'outer: while log.steps() < total_steps {
        rng.shuffle(&mut order);
        let mut epoch_sum = 0.0;
        let mut epoch_steps = 0;
        for chunk in order.chunks(cfg.batch_size) {
            if log.steps() >= total_steps {
                break 'outer;
            }
            let batch: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
            let (loss, grads) = pool.install(|| batch_gradients(model, &batch))?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss at step {}", log.steps())));
            }
            opt.step(&mut model.store, &grads, |grp| cfg.effective_lr(grp));
            log.step_losses.push(loss);
            epoch_sum += loss;
            epoch_steps += 1;
        }
        let epoch_loss = epoch_sum / epoch_steps as f64;
        log.epoch_losses.push(epoch_loss);
        if cfg.target_loss.is_some_and(|t| epoch_loss < t) {
            break;
        }
    }
    Ok(log)
}

// Checkpoint layout (little-endian):
//
//   magic    b"RSCK"
//   version  u16 = 1
//   length   u32, byte length of the manifest
//   manifest UTF-8 JSON {"config": …, "blocks": [{name, group, rows, cols}]}
//   blocks   f32 values of each block in manifest order, row-major
const CKPT_MAGIC: &[u8; 4] = b"RSCK";
const CKPT_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockInfo {
    pub name: String,
    pub group: Group,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ModelConfig,
    pub blocks: Vec<BlockInfo>,
}

impl Model {
    pub fn manifest(&self) -> Manifest {
        Manifest {
            config: self.cfg.clone(),
            blocks: self
                .store
                .entries()
                .iter()
                .map(|e| BlockInfo {
                    name: e.name.clone(),
                    group: e.group,
                    rows: e.value.rows(),
                    cols: e.value.cols(),
                })
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest())?;
        let len = u32::try_from(manifest.len())
            .map_err(|_| Error::InvalidInput("manifest too large".into()))?;
        let mut out = Vec::with_capacity(10 + manifest.len() + 4 * self.store.scalar_count());
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&manifest);
        for e in self.store.entries() {
            for &v in e.value.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = ByteCursor::new(bytes);
        if cur.take(4, "magic")? != CKPT_MAGIC {
            return Err(Error::format(0, "bad magic, expected RSCK"));
        }
        let version = cur.u16("version")?;
        if version != CKPT_VERSION {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        let len = cur.u32("manifest length")? as usize;
        let manifest_at = cur.offset();
        let manifest: Manifest = serde_json::from_slice(cur.take(len, "manifest")?)
            .map_err(|e| Error::format(manifest_at, format!("bad manifest: {e}")))?;
        let mut model = Model::new(manifest.config.clone(), 0)?;
        let expected = model.manifest();
        if expected.blocks != manifest.blocks {
            return Err(Error::format(
                manifest_at,
                "manifest blocks do not match the configured architecture",
            ));
        }
        for id in model.store.ids().collect::<Vec<_>>() {
            let m = model.store.get_mut(id);
            for v in m.data_mut() {
                *v = f64::from(cur.f32("parameter block")?);
            }
        }
        if cur.remaining() != 0 {
            return Err(Error::format(cur.offset(), "trailing bytes after last block"));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
