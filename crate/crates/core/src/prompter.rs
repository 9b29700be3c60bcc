//! Multi-level visual prompter.
//!
//! Learnable aggregation tokens first self-attend jointly with the user query
//! tokens (keeping only the aggregation rows), then cross-attend to the
//! retrieved semantic tokens, then cross-attend separately to every level of
//! visual features. The per-level outputs are stacked level by level into the
//! semantic-augmented prompt `S` of shape `(N_a·L) × d`.
//!
//! Every attention block normalizes its queries, projects keys/values into
//! `d` (level blocks project from `d_l`), and adds a residual on the queries.
//! Visual levels are indexed from 0 here; block `l` of `S` holds rows
//! `[l·N_a, (l+1)·N_a)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::Attention;
use crate::numerics::{Matrix, Rng};
use crate::params::{Group, ParamId, ParamSet};

/// Standard deviation of the aggregation-token initialization.
pub const AGG_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrompterConfig {
    pub num_agg_tokens: usize,
    pub dim: usize,
    pub heads: usize,
    /// Feature width `d_l` of each visual level; its length is `L`.
    pub level_dims: Vec<usize>,
}

impl PrompterConfig {
    pub fn levels(&self) -> usize {
        self.level_dims.len()
    }

    /// Rows of the prompt matrix, `N_a·L`.
    pub fn prompt_rows(&self) -> usize {
        self.num_agg_tokens * self.levels()
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.num_agg_tokens == 0 {
            errs.push("prompter: aggregation-token count must be >= 1".to_string());
        }
        if self.heads == 0 || self.dim == 0 || !self.dim.is_multiple_of(self.heads) {
            errs.push(format!(
                "prompter: dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            ));
        }
        if self.level_dims.is_empty() {
            errs.push("prompter: at least one visual level is required".to_string());
        }
        if self.level_dims.contains(&0) {
            errs.push("prompter: level dims must be positive".to_string());
        }
        errs
    }
}

#[derive(Clone, Debug)]
pub struct PrompterParams {
    pub f_agg: ParamId,
    pub self_attn: Attention,
    pub sem_xattn: Attention,
    pub level_xattn: Vec<Attention>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptInputs {
    pub f_user: Matrix,
    pub f_semantic: Matrix,
    pub f_vis: Vec<Matrix>,
}

#[derive(Clone, Debug)]
pub struct Prompter {
    pub cfg: PrompterConfig,
    pub params: PrompterParams,
}

impl Prompter {
    pub fn init(cfg: PrompterConfig, store: &mut ParamSet, rng: &mut Rng, prefix: &str) -> Result<Self> {
        let errs = cfg.validate();
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        let grp = Group::Prompter;
        let (d, h) = (cfg.dim, cfg.heads);
        let f_agg = store.add(
            format!("{prefix}.f_agg"),
            grp,
            Matrix::randn(cfg.num_agg_tokens, d, AGG_INIT_STD, rng),
        );
        let self_attn = Attention::init(store, &format!("{prefix}.self_attn"), d, d, h, grp, rng)?;
        let sem_xattn = Attention::init(store, &format!("{prefix}.sem_xattn"), d, d, h, grp, rng)?;
        let level_xattn = cfg
            .level_dims
            .iter()
            .enumerate()
            .map(|(l, &dl)| Attention::init(store, &format!("{prefix}.level{l}_xattn"), d, dl, h, grp, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg,
            params: PrompterParams {
                f_agg,
                self_attn,
                sem_xattn,
                level_xattn,
            },
        })
    }

    fn check_width(&self, g: &Graph, v: Var, want: usize, op: &'static str) -> Result<()> {
        let s = g.shape(v);
        if s.1 != want || s.0 == 0 {
            return Err(Error::shape(op, s, (s.0.max(1), want)));
        }
        Ok(())
    }

    /// `z¹ = SelfAttn([f_agg; f_user])[:N_a]`.
    pub fn aggregate_query_graph(&self, g: &mut Graph, f_user: Var) -> Result<Var> {
        self.check_width(g, f_user, self.cfg.dim, "aggregate_query")?;
        let agg = g.param(self.params.f_agg);
        let f_in = g.concat_rows(&[agg, f_user])?;
        let f_out = self.params.self_attn.self_attend(g, f_in, false)?;
        g.slice_rows(f_out, 0, self.cfg.num_agg_tokens)
    }

    /// `z² = z¹ + CrossAttn(z¹, f_semantic, f_semantic)`.
    pub fn attend_semantics_graph(&self, g: &mut Graph, z1: Var, f_semantic: Var) -> Result<Var> {
        self.check_width(g, z1, self.cfg.dim, "attend_semantics(z1)")?;
        self.check_width(g, f_semantic, self.cfg.dim, "attend_semantics(f_semantic)")?;
        self.params.sem_xattn.cross(g, z1, f_semantic)
    }

    /// `sˡ = z² + CrossAttn_l(z², f_vis_l, f_vis_l)`; `level` is 0-based.
    pub fn attend_level_graph(&self, g: &mut Graph, z2: Var, f_vis_l: Var, level: usize) -> Result<Var> {
        let attn = self.params.level_xattn.get(level).ok_or_else(|| {
            Error::InvalidInput(format!(
                "level index {level} out of range for {} levels",
                self.cfg.levels()
            ))
        })?;
        self.check_width(g, z2, self.cfg.dim, "attend_level(z2)")?;
        self.check_width(g, f_vis_l, self.cfg.level_dims[level], "attend_level(f_vis)")?;
        attn.cross(g, z2, f_vis_l)
    }

    /// Stacks `s¹ … sᴸ` into `S`.
    pub fn build_prompt_graph(&self, g: &mut Graph, f_user: Var, f_semantic: Var, f_vis: &[Var]) -> Result<Var> {
        if f_vis.len() != self.cfg.levels() {
            return Err(Error::InvalidInput(format!(
                "expected {} visual levels, got {}",
                self.cfg.levels(),
                f_vis.len()
            )));
        }
        let z1 = self.aggregate_query_graph(g, f_user)?;
        let z2 = self.attend_semantics_graph(g, z1, f_semantic)?;
        let blocks = f_vis
            .iter()
            .enumerate()
            .map(|(l, &fv)| self.attend_level_graph(g, z2, fv, l))
            .collect::<Result<Vec<_>>>()?;
        g.concat_rows(&blocks)
    }

    pub fn aggregate_query(&self, store: &ParamSet, f_user: &Matrix) -> Result<Matrix> {
        let mut g = Graph::new(store);
        let u = g.constant(f_user.clone());
        let out = self.aggregate_query_graph(&mut g, u)?;
        Ok(g.value(out).clone())
    }

    pub fn attend_semantics(&self, store: &ParamSet, z1: &Matrix, f_semantic: &Matrix) -> Result<Matrix> {
        let mut g = Graph::new(store);
        let z = g.constant(z1.clone());
        let s = g.constant(f_semantic.clone());
        let out = self.attend_semantics_graph(&mut g, z, s)?;
        Ok(g.value(out).clone())
    }

    pub fn attend_level(&self, store: &ParamSet, z2: &Matrix, f_vis_l: &Matrix, level: usize) -> Result<Matrix> {
        let mut g = Graph::new(store);
        let z = g.constant(z2.clone());
        let f = g.constant(f_vis_l.clone());
        let out = self.attend_level_graph(&mut g, z, f, level)?;
        Ok(g.value(out).clone())
    }

    pub fn build_prompt(&self, store: &ParamSet, inputs: &PromptInputs) -> Result<Matrix> {
        let mut g = Graph::new(store);
        let u = g.constant(inputs.f_user.clone());
        let s = g.constant(inputs.f_semantic.clone());
        let vis: Vec<Var> = inputs.f_vis.iter().map(|m| g.constant(m.clone())).collect();
        let out = self.build_prompt_graph(&mut g, u, s, &vis)?;
        Ok(g.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{matmul, relative_error, scaled_dot_attention};

    fn toy(n_a: usize, d: usize, heads: usize, level_dims: Vec<usize>, seed: u64) -> (Prompter, ParamSet) {
        let mut store = ParamSet::new();
        let mut rng = Rng::new(seed);
        let cfg = PrompterConfig {
            num_agg_tokens: n_a,
            dim: d,
            heads,
            level_dims,
        };
        let p = Prompter::init(cfg, &mut store, &mut rng, "prompter").unwrap();
        // give the norms non-trivial affine parts
        for id in store.ids().collect::<Vec<_>>() {
            if store.entry(id).name.ends_with(".gamma") || store.entry(id).name.ends_with(".beta") {
                let m = store.get(id).clone();
                *store.get_mut(id) = m.add(&Matrix::randn(1, m.cols(), 0.3, &mut rng)).unwrap();
            }
        }
        (p, store)
    }

    fn layer_norm_oracle(x: &Matrix, gamma: &Matrix, beta: &Matrix) -> Matrix {
        Matrix::from_fn(x.rows(), x.cols(), |r, c| {
            let row = x.row(r);
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            (row[c] - mean) / (var + 1e-5).sqrt() * gamma.get(0, c) + beta.get(0, c)
        })
    }

    /// Per-head composition of `scaled_dot_attention`, then concat, output
    /// projection and residual.
    fn attention_oracle(store: &ParamSet, a: &Attention, q_in: &Matrix, kv: &Matrix, self_attn: bool) -> Matrix {
        let nq = layer_norm_oracle(q_in, store.get(a.query_norm.gamma), store.get(a.query_norm.beta));
        let kv = if self_attn { nq.clone() } else { kv.clone() };
        let q = matmul(&nq, store.get(a.wq)).unwrap();
        let k = matmul(&kv, store.get(a.wk)).unwrap();
        let v = matmul(&kv, store.get(a.wv)).unwrap();
        let hd = q.cols() / a.heads;
        let heads: Vec<Matrix> = (0..a.heads)
            .map(|h| {
                let s = |m: &Matrix| m.slice_cols(h * hd, (h + 1) * hd).unwrap();
                scaled_dot_attention(&s(&q), &s(&k), &s(&v)).unwrap()
            })
            .collect();
        let refs: Vec<&Matrix> = heads.iter().collect();
        let joined = Matrix::concat_cols(&refs).unwrap();
        q_in.add(&matmul(&joined, store.get(a.wo)).unwrap()).unwrap()
    }

    fn assert_close(a: &Matrix, b: &Matrix, tol: f64) {
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= tol, "{x} vs {y}");
        }
    }

    #[test]
    fn aggregate_query_shapes_and_oracle() {
        let (p, store) = toy(4, 8, 2, vec![8], 1);
        let mut rng = Rng::new(2);
        let f_user = Matrix::randn(3, 8, 1.0, &mut rng);
        let z1 = p.aggregate_query(&store, &f_user).unwrap();
        assert_eq!(z1.shape(), (4, 8));

        let f_in = Matrix::concat_rows(&[store.get(p.params.f_agg), &f_user]).unwrap();
        assert_eq!(f_in.rows(), 7);
        let full = attention_oracle(&store, &p.params.self_attn, &f_in, &f_in, true);
        assert_close(&z1, &full.slice_rows(0, 4).unwrap(), 1e-10);

        assert!(matches!(
            p.aggregate_query(&store, &Matrix::zeros(3, 5)),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn aggregate_query_pre_residual_is_convex() {
        let (p, mut store) = toy(3, 4, 1, vec![4], 3);
        let a = &p.params.self_attn;
        for id in [a.wq, a.wk, a.wv, a.wo] {
            *store.get_mut(id) = Matrix::identity(4);
        }
        *store.get_mut(a.query_norm.gamma) = Matrix::filled(1, 4, 1.0);
        *store.get_mut(a.query_norm.beta) = Matrix::zeros(1, 4);
        let f_agg = store.get(p.params.f_agg).clone();
        let f_in = Matrix::concat_rows(&[&f_agg, &f_agg]).unwrap();
        let mut g = Graph::new(&store);
        let x = g.constant(f_in.clone());
        let y = a.self_attend(&mut g, x, false).unwrap();
        let out = g.value(y).sub(&f_in).unwrap();
        // identity value projection with the normalized rows as values
        let normed = layer_norm_oracle(&f_in, &Matrix::filled(1, 4, 1.0), &Matrix::zeros(1, 4));
        for c in 0..4 {
            let col: Vec<f64> = (0..normed.rows()).map(|r| normed.get(r, c)).collect();
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for r in 0..out.rows() {
                assert!(out.get(r, c) >= lo - 1e-12 && out.get(r, c) <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn attend_semantics_oracle_single_key_and_sensitivity() {
        let (p, store) = toy(4, 8, 2, vec![8], 4);
        let mut rng = Rng::new(5);
        let z1 = Matrix::randn(4, 8, 1.0, &mut rng);
        let sem = Matrix::randn(6, 8, 1.0, &mut rng);
        let got = p.attend_semantics(&store, &z1, &sem).unwrap();
        let want = attention_oracle(&store, &p.params.sem_xattn, &z1, &sem, false);
        assert_close(&got, &want, 1e-10);

        // one semantic row: pre-residual output is that row's value projection
        let one = Matrix::randn(1, 8, 1.0, &mut rng);
        let out = p.attend_semantics(&store, &z1, &one).unwrap().sub(&z1).unwrap();
        let a = &p.params.sem_xattn;
        let projected = matmul(&matmul(&one, store.get(a.wv)).unwrap(), store.get(a.wo)).unwrap();
        for r in 0..4 {
            for c in 0..8 {
                assert!((out.get(r, c) - projected.get(0, c)).abs() < 1e-12);
            }
        }

        let mut perturbed = sem.clone();
        perturbed.set(2, 3, perturbed.get(2, 3) + 0.5);
        assert_ne!(p.attend_semantics(&store, &z1, &perturbed).unwrap(), got);
    }

    #[test]
    fn attend_level_oracle_reduction_and_errors() {
        let (p, mut store) = toy(3, 8, 2, vec![5, 8], 6);
        let mut rng = Rng::new(7);
        let z2 = Matrix::randn(3, 8, 1.0, &mut rng);
        let f0 = Matrix::randn(4, 5, 1.0, &mut rng);
        let got = p.attend_level(&store, &z2, &f0, 0).unwrap();
        let want = attention_oracle(&store, &p.params.level_xattn[0], &z2, &f0, false);
        assert_close(&got, &want, 1e-10);

        // single visual token
        let single = Matrix::randn(1, 5, 1.0, &mut rng);
        let out = p.attend_level(&store, &z2, &single, 0).unwrap().sub(&z2).unwrap();
        let a = &p.params.level_xattn[0];
        let projected = matmul(&matmul(&single, store.get(a.wv)).unwrap(), store.get(a.wo)).unwrap();
        for r in 0..3 {
            assert_close(
                &out.slice_rows(r, r + 1).unwrap(),
                &projected,
                1e-12,
            );
        }

        // d_l = d with the semantic block's weights: same computation
        let (sem, lvl) = (p.params.sem_xattn.clone(), p.params.level_xattn[1].clone());
        for (from, to) in [
            (sem.wq, lvl.wq),
            (sem.wk, lvl.wk),
            (sem.wv, lvl.wv),
            (sem.wo, lvl.wo),
            (sem.query_norm.gamma, lvl.query_norm.gamma),
            (sem.query_norm.beta, lvl.query_norm.beta),
        ] {
            *store.get_mut(to) = store.get(from).clone();
        }
        let f1 = Matrix::randn(5, 8, 1.0, &mut rng);
        assert_eq!(
            p.attend_level(&store, &z2, &f1, 1).unwrap(),
            p.attend_semantics(&store, &z2, &f1).unwrap()
        );

        assert!(p.attend_level(&store, &z2, &f1, 2).is_err());
        assert!(matches!(p.attend_level(&store, &z2, &f1, 0), Err(Error::Shape { .. })));
    }

    fn inputs(levels: &[usize], rng: &mut Rng) -> PromptInputs {
        PromptInputs {
            f_user: Matrix::randn(3, 8, 1.0, rng),
            f_semantic: Matrix::randn(5, 8, 1.0, rng),
            f_vis: levels.iter().map(|&dl| Matrix::randn(6, dl, 1.0, rng)).collect(),
        }
    }

    #[test]
    fn build_prompt_blocks_follow_level_order() {
        let (p, store) = toy(4, 8, 2, vec![6, 6], 8);
        let mut rng = Rng::new(9);
        let inp = inputs(&[6, 6], &mut rng);
        let s = p.build_prompt(&store, &inp).unwrap();
        assert_eq!(s.shape(), (8, 8));
        let z1 = p.aggregate_query(&store, &inp.f_user).unwrap();
        let z2 = p.attend_semantics(&store, &z1, &inp.f_semantic).unwrap();
        for l in 0..2 {
            let block = p.attend_level(&store, &z2, &inp.f_vis[l], l).unwrap();
            assert_eq!(s.slice_rows(4 * l, 4 * (l + 1)).unwrap(), block);
        }
        assert_eq!(s, p.build_prompt(&store, &inp).unwrap());
    }

    #[test]
    fn perturbing_one_level_leaves_other_blocks_bit_identical() {
        let (p, store) = toy(2, 8, 2, vec![4, 4, 4], 10);
        let mut rng = Rng::new(11);
        let inp = inputs(&[4, 4, 4], &mut rng);
        let base = p.build_prompt(&store, &inp).unwrap();
        let mut changed = inp.clone();
        changed.f_vis[2].set(0, 0, 9.0);
        let after = p.build_prompt(&store, &changed).unwrap();
        assert_eq!(base.slice_rows(0, 4).unwrap(), after.slice_rows(0, 4).unwrap());
        assert_ne!(base.slice_rows(4, 6).unwrap(), after.slice_rows(4, 6).unwrap());
    }

    #[test]
    fn build_prompt_rejects_wrong_level_count() {
        let (p, store) = toy(2, 8, 2, vec![4, 4], 12);
        let mut rng = Rng::new(13);
        let mut inp = inputs(&[4, 4], &mut rng);
        inp.f_vis.pop();
        assert!(p.build_prompt(&store, &inp).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (p, store) = toy(3, 8, 2, vec![8, 6], 14);
        let mut rng = Rng::new(15);
        let inp = inputs(&[8, 6], &mut rng);
        let loss_of = |store: &ParamSet| -> (f64, Vec<Option<Matrix>>) {
            let mut g = Graph::new(store);
            let u = g.constant(inp.f_user.clone());
            let s = g.constant(inp.f_semantic.clone());
            let vis: Vec<Var> = inp.f_vis.iter().map(|m| g.constant(m.clone())).collect();
            let out = p.build_prompt_graph(&mut g, u, s, &vis).unwrap();
            let total = g.sum(out);
            let v = g.value(total).data()[0];
            (v, g.backward(total).unwrap().into_param_grads())
        };
        let (_, grads) = loss_of(&store);
        let mut probe = store.clone();
        let mut worst: f64 = 0.0;
        for id in store.ids() {
            let g = grads[id.index()].as_ref().expect("every prompter parameter is used");
            let n = g.len();
            for i in (0..n).step_by(1 + n / 12) {
                let orig = probe.get(id).data()[i];
                probe.get_mut(id).data_mut()[i] = orig + 1e-5;
                let plus = loss_of(&probe).0;
                probe.get_mut(id).data_mut()[i] = orig - 1e-5;
                let minus = loss_of(&probe).0;
                probe.get_mut(id).data_mut()[i] = orig;
                worst = worst.max(relative_error(g.data()[i], (plus - minus) / 2e-5));
            }
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }
}
