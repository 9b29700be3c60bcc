//! Segment-routed low-rank experts running beside the feed-forward block.
//!
//! A sequence is tagged by segment: image tokens, semantic prompt tokens of
//! level `l` (1-based), and query tokens, laid out contiguously in that
//! order. Expert `l` sees the image, query and level-`l` semantic rows; all
//! other rows are zeroed before the expert. Each expert is the bias-free
//! bottleneck `x · U · V` with `U: d_h × d_r`, `V: d_r × d_h`. Image and query
//! tokens mix the experts with per-token softmax gates `softmax(x · W_g)`;
//! level-`l` semantic tokens take expert `l` with weight 1. The block output is
//! `FFN(x) + Σ_l g_l · h^l`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::GatedFfn;
use crate::numerics::{softmax_rows, Matrix, Rng};
use crate::params::{Group, ParamId, ParamSet};

pub const EXPERT_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Segment {
    Image,
    /// Semantic prompt token of level `l`, `1 ≤ l ≤ L`.
    Semantic(usize),
    Query,
}

impl Segment {
    fn rank(self, levels: usize) -> usize {
        match self {
            Segment::Image => 0,
            Segment::Semantic(l) => l,
            Segment::Query => levels + 1,
        }
    }
}

/// Checks level range and the image / semantic 1..L / query ordering.
pub fn validate_segments(segments: &[Segment], levels: usize) -> Result<()> {
    let mut last = 0;
    for (t, &s) in segments.iter().enumerate() {
        if let Segment::Semantic(l) = s {
            if l == 0 || l > levels {
                return Err(Error::InvalidInput(format!(
                    "token {t}: semantic level {l} outside 1..={levels}"
                )));
            }
        }
        let r = s.rank(levels);
        if r < last {
            return Err(Error::InvalidInput(format!(
                "token {t}: segment {s:?} out of order"
            )));
        }
        last = r;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentedTokens {
    pub hidden: Matrix,
    pub segments: Vec<Segment>,
}

impl SegmentedTokens {
    pub fn new(hidden: Matrix, segments: Vec<Segment>, levels: usize) -> Result<Self> {
        if hidden.rows() != segments.len() {
            return Err(Error::InvalidInput(format!(
                "{} hidden rows but {} segment tags",
                hidden.rows(),
                segments.len()
            )));
        }
        validate_segments(&segments, levels)?;
        Ok(Self { hidden, segments })
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RouteMask {
    pub level: usize,
    pub bits: Vec<bool>,
}

/// Mask for expert `level` (1-based) among `levels` experts.
pub fn build_mask(segments: &[Segment], level: usize, levels: usize) -> Result<RouteMask> {
    if level == 0 || level > levels {
        return Err(Error::InvalidInput(format!(
            "expert level {level} outside 1..={levels}"
        )));
    }
    let bits = segments
        .iter()
        .map(|s| match *s {
            Segment::Image | Segment::Query => true,
            Segment::Semantic(l) => l == level,
        })
        .collect();
    Ok(RouteMask { level, bits })
}

/// `x · U · V`.
pub fn expert_forward(u: &Matrix, v: &Matrix, x_masked: &Matrix) -> Result<Matrix> {
    if u.cols() != v.rows() || v.cols() != u.rows() {
        return Err(Error::shape("expert_forward", u.shape(), v.shape()));
    }
    x_masked.matmul(u)?.matmul(v)
}

fn one_hot_level(segment: Segment) -> Option<usize> {
    match segment {
        Segment::Semantic(l) => Some(l - 1),
        _ => None,
    }
}

/// Per-token expert weights, `T × L`.
pub fn gate_weights(w_g: &Matrix, hidden: &Matrix, segments: &[Segment]) -> Result<Matrix> {
    if hidden.rows() != segments.len() {
        return Err(Error::shape(
            "gate_weights",
            hidden.shape(),
            (segments.len(), w_g.rows()),
        ));
    }
    validate_segments(segments, w_g.cols())?;
    let mut gates = softmax_rows(&hidden.matmul(w_g)?);
    for (t, &s) in segments.iter().enumerate() {
        if let Some(l) = one_hot_level(s) {
            gates.row_mut(t).fill(0.0);
            gates.set(t, l, 1.0);
        }
    }
    Ok(gates)
}

/// `h_s[t] = Σ_l gates[t][l] · h^l[t]`, summed in level order.
pub fn merge_experts(h_list: &[Matrix], gates: &Matrix) -> Result<Matrix> {
    let first = h_list
        .first()
        .ok_or_else(|| Error::InvalidInput("no expert outputs to merge".into()))?;
    if gates.cols() != h_list.len() || gates.rows() != first.rows() {
        return Err(Error::shape(
            "merge_experts",
            gates.shape(),
            (first.rows(), h_list.len()),
        ));
    }
    let mut out = Matrix::zeros(first.rows(), first.cols());
    for (l, h) in h_list.iter().enumerate() {
        if h.shape() != first.shape() {
            return Err(Error::shape("merge_experts", h.shape(), first.shape()));
        }
        for t in 0..h.rows() {
            let g = gates.get(t, l);
            for (o, x) in out.row_mut(t).iter_mut().zip(h.row(t)) {
                *o += g * x;
            }
        }
    }
    Ok(out)
}

/// Parameters of one expert: `2 · d_h · d_r`.
pub fn expert_parameter_count(d_h: usize, d_r: usize) -> u64 {
    2 * d_h as u64 * d_r as u64
}

/// Parameters of one conventional mixture-of-experts FFN expert: `3 · d_h · d_i`.
pub fn moe_expert_parameter_count(d_h: usize, d_i: usize) -> u64 {
    GatedFfn::parameter_count(d_h, d_i)
}

#[derive(Clone, Debug)]
pub struct Expert {
    pub u: ParamId,
    pub v: ParamId,
}

#[derive(Clone, Debug)]
pub struct ExpertLayerParams {
    pub experts: Vec<Expert>,
    pub gate: ParamId,
    pub ffn: GatedFfn,
}

impl ExpertLayerParams {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamSet,
        name: &str,
        d_h: usize,
        d_r: usize,
        d_i: usize,
        levels: usize,
        group: Group,
        rng: &mut Rng,
    ) -> Result<Self> {
        if levels == 0 || d_r == 0 || d_r >= d_h {
            return Err(Error::InvalidInput(format!(
                "{name}: need L >= 1 and 0 < d_r < d_h (L={levels}, d_r={d_r}, d_h={d_h})"
            )));
        }
        let experts = (1..=levels)
            .map(|l| Expert {
                u: store.add(
                    format!("{name}.expert{l}.u"),
                    group,
                    Matrix::randn(d_h, d_r, EXPERT_INIT_STD, rng),
                ),
                v: store.add(format!("{name}.expert{l}.v"), group, Matrix::zeros(d_r, d_h)),
            })
            .collect();
        let gate = store.add(format!("{name}.gate"), group, Matrix::zeros(d_h, levels));
        let ffn = GatedFfn::init(store, &format!("{name}.ffn"), d_h, d_i, group, rng);
        Ok(Self { experts, gate, ffn })
    }

    pub fn levels(&self) -> usize {
        self.experts.len()
    }

    /// Expert `l` (1-based) applied to its masked input.
    pub fn expert_graph(&self, g: &mut Graph, x: Var, segments: &[Segment], level: usize) -> Result<Var> {
        let mask = build_mask(segments, level, self.levels())?;
        let e = &self.experts[level - 1];
        let masked = g.mask_rows(x, &mask.bits)?;
        let u = g.param(e.u);
        let v = g.param(e.v);
        let low = g.matmul(masked, u)?;
        g.matmul(low, v)
    }

    pub fn gate_graph(&self, g: &mut Graph, x: Var, segments: &[Segment]) -> Result<Var> {
        let levels = self.levels();
        let wg = g.param(self.gate);
        let logits = g.matmul(x, wg)?;
        let probs = g.softmax_rows(logits);
        let routed: Vec<bool> = segments.iter().map(|s| one_hot_level(*s).is_none()).collect();
        if routed.iter().all(|&r| r) {
            return Ok(probs);
        }
        let kept = g.mask_rows(probs, &routed)?;
        let mut fixed = Matrix::zeros(segments.len(), levels);
        for (t, &s) in segments.iter().enumerate() {
            if let Some(l) = one_hot_level(s) {
                fixed.set(t, l, 1.0);
            }
        }
        let fixed = g.constant(fixed);
        g.add(kept, fixed)
    }

    /// `FFN(x) + Σ_l g_l · h^l` for hidden rows `x` tagged by `segments`.
    pub fn forward_graph(&self, g: &mut Graph, x: Var, segments: &[Segment]) -> Result<Var> {
        let (rows, _) = g.shape(x);
        if rows != segments.len() {
            return Err(Error::InvalidInput(format!(
                "{rows} hidden rows but {} segment tags",
                segments.len()
            )));
        }
        validate_segments(segments, self.levels())?;
        let gates = self.gate_graph(g, x, segments)?;
        let mut merged = None;
        for l in 1..=self.levels() {
            let h = self.expert_graph(g, x, segments, l)?;
            let gl = g.slice_cols(gates, l - 1, l)?;
            let weighted = g.scale_rows(h, gl)?;
            merged = Some(match merged {
                None => weighted,
                Some(acc) => g.add(acc, weighted)?,
            });
        }
        let ffn = self.ffn.forward(g, x)?;
        match merged {
            Some(h_s) => g.add(ffn, h_s),
            None => Ok(ffn),
        }
    }
}

pub fn expert_block_forward(store: &ParamSet, params: &ExpertLayerParams, x: &SegmentedTokens) -> Result<Matrix> {
    let mut g = Graph::new(store);
    let h = g.constant(x.hidden.clone());
    let out = params.forward_graph(&mut g, h, &x.segments)?;
    Ok(g.value(out).clone())
}
