//! Shared layers: affine layer norm, linear maps, multi-head attention and
//! feed-forward blocks, all expressed on a [`Graph`].
//!
//! Weight matrices are stored `in × out` and applied as `x · W` to row
//! vectors. Multi-head attention splits the projected `d` columns into
//! `heads` contiguous blocks of width `d / heads`, attends within each block
//! and concatenates the block outputs in head order.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::numerics::{Matrix, Rng};
use crate::params::{Group, ParamId, ParamSet};

/// Row standardization followed by a learned scale and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn init(store: &mut ParamSet, name: &str, dim: usize, group: Group) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), group, Matrix::filled(1, dim, 1.0)),
            beta: store.add(format!("{name}.beta"), group, Matrix::zeros(1, dim)),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let n = g.layer_norm_rows(x);
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        let scaled = g.mul_row(n, gamma)?;
        g.add_row(scaled, beta)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    /// Gaussian weights with std `1/√fan_in`, zero bias.
    pub fn init(
        store: &mut ParamSet,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        group: Group,
        rng: &mut Rng,
    ) -> Self {
        let std = 1.0 / (fan_in as f64).sqrt();
        Self::with_weight(
            store,
            name,
            Matrix::randn(fan_in, fan_out, std, rng),
            bias,
            group,
        )
    }

    pub fn with_weight(
        store: &mut ParamSet,
        name: &str,
        weight: Matrix,
        bias: bool,
        group: Group,
    ) -> Self {
        let cols = weight.cols();
        let weight = store.add(format!("{name}.weight"), group, weight);
        let bias = bias.then(|| store.add(format!("{name}.bias"), group, Matrix::zeros(1, cols)));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        g.linear(x, self.weight, self.bias)
    }
}

/// Multi-head attention with a pre-norm on the query stream, an output
/// projection and a residual connection on the queries.
#[derive(Clone, Debug)]
pub struct Attention {
    pub heads: usize,
    pub query_norm: LayerNorm,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

impl Attention {
    /// Queries have width `d`; keys and values are read from rows of width
    /// `kv_dim` and projected to `d`.
    pub fn init(
        store: &mut ParamSet,
        name: &str,
        d: usize,
        kv_dim: usize,
        heads: usize,
        group: Group,
        rng: &mut Rng,
    ) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::InvalidInput(format!(
                "{name}: width {d} is not divisible by {heads} heads"
            )));
        }
        let q_std = 1.0 / (d as f64).sqrt();
        let kv_std = 1.0 / (kv_dim as f64).sqrt();
        Ok(Self {
            heads,
            query_norm: LayerNorm::init(store, &format!("{name}.norm"), d, group),
            wq: store.add(format!("{name}.wq"), group, Matrix::randn(d, d, q_std, rng)),
            wk: store.add(format!("{name}.wk"), group, Matrix::randn(kv_dim, d, kv_std, rng)),
            wv: store.add(format!("{name}.wv"), group, Matrix::randn(kv_dim, d, kv_std, rng)),
            wo: store.add(format!("{name}.wo"), group, Matrix::randn(d, d, q_std, rng)),
        })
    }

    /// Attention output before the residual: `concat_h(attn_h) · Wo` with
    /// queries `norm(q_in)·Wq` and keys/values `kv·Wk`, `kv·Wv`.
    pub fn attend(&self, g: &mut Graph, q_in: Var, kv: Var, causal: bool) -> Result<Var> {
        let normed = self.query_norm.forward(g, q_in)?;
        self.attend_normed(g, normed, kv, causal)
    }

    fn attend_normed(&self, g: &mut Graph, normed_q: Var, kv: Var, causal: bool) -> Result<Var> {
        let wq = g.param(self.wq);
        let wk = g.param(self.wk);
        let wv = g.param(self.wv);
        let wo = g.param(self.wo);
        let q = g.matmul(normed_q, wq)?;
        let k = g.matmul(kv, wk)?;
        let v = g.matmul(kv, wv)?;
        let d = g.shape(q).1;
        let head_dim = d / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * head_dim, (h + 1) * head_dim);
            let qh = g.slice_cols(q, lo, hi)?;
            let kh = g.slice_cols(k, lo, hi)?;
            let vh = g.slice_cols(v, lo, hi)?;
            let kt = g.transpose(kh);
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale);
            let weights = if causal {
                g.causal_softmax_rows(scores)?
            } else {
                g.softmax_rows(scores)
            };
            outs.push(g.matmul(weights, vh)?);
        }
        let joined = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)?
        };
        g.matmul(joined, wo)
    }

    /// `q_in + attend(q_in, kv)`: queries are normalized, keys/values are not.
    pub fn cross(&self, g: &mut Graph, q_in: Var, kv: Var) -> Result<Var> {
        let out = self.attend(g, q_in, kv, false)?;
        g.add(q_in, out)
    }

    /// `x + attend(norm(x), norm(x))`.
    pub fn self_attend(&self, g: &mut Graph, x: Var, causal: bool) -> Result<Var> {
        let normed = self.query_norm.forward(g, x)?;
        let out = self.attend_normed(g, normed, normed, causal)?;
        g.add(x, out)
    }
}

/// Two-layer perceptron with SiLU: `silu(x·W1 + b1)·W2 + b2`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn init(
        store: &mut ParamSet,
        name: &str,
        dims: (usize, usize, usize),
        group: Group,
        rng: &mut Rng,
    ) -> Self {
        let (input, hidden, output) = dims;
        Self {
            fc1: Linear::init(store, &format!("{name}.fc1"), input, hidden, true, group, rng),
            fc2: Linear::init(store, &format!("{name}.fc2"), hidden, output, true, group, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.silu(h);
        self.fc2.forward(g, h)
    }
}

/// Gated feed-forward `(silu(x·Pg) ⊙ (x·Pu))·Pd`, bias-free.
#[derive(Clone, Debug)]
pub struct GatedFfn {
    pub gate: ParamId,
    pub up: ParamId,
    pub down: ParamId,
}

impl GatedFfn {
    pub fn init(
        store: &mut ParamSet,
        name: &str,
        d: usize,
        inner: usize,
        group: Group,
        rng: &mut Rng,
    ) -> Self {
        let in_std = 1.0 / (d as f64).sqrt();
        let out_std = 1.0 / (inner as f64).sqrt();
        Self {
            gate: store.add(format!("{name}.gate"), group, Matrix::randn(d, inner, in_std, rng)),
            up: store.add(format!("{name}.up"), group, Matrix::randn(d, inner, in_std, rng)),
            down: store.add(format!("{name}.down"), group, Matrix::randn(inner, d, out_std, rng)),
        }
    }

    /// Parameter count `3·d·inner`.
    pub fn parameter_count(d: usize, inner: usize) -> u64 {
        3 * d as u64 * inner as u64
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let pg = g.param(self.gate);
        let pu = g.param(self.up);
        let pd = g.param(self.down);
        let gate = g.matmul(x, pg)?;
        let gate = g.silu(gate);
        let up = g.matmul(x, pu)?;
        let h = g.mul(gate, up)?;
        g.matmul(h, pd)
    }
}
