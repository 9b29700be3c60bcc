//! Reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Graph`] records every operation eagerly (values are computed as the
//! graph is built) and [`Graph::backward`] walks the record in reverse.
//! Nodes only carry gradients when at least one input does: parameters and
//! [`Graph::input`] leaves require gradients, [`Graph::constant`] leaves do
//! not.

use crate::error::{Error, Result};
use crate::numerics::{matmul, softmax_in_place, Matrix};
use crate::params::{ParamId, ParamSet};

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Exp(Var),
    Softmax(Var),
    LayerNorm(Var, Vec<f64>),
    Silu(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    MaskRows(Var, Vec<bool>),
    ScaleRows(Var, Var),
    L2NormalizeRows(Var, Vec<f64>),
    GatherRows(Var, Vec<usize>),
    CrossEntropy(Var, Vec<usize>, Matrix),
    Sum(Var),
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

static NO_PARAMS: ParamSet = ParamSet::new();

pub struct Graph<'p> {
    params: &'p ParamSet,
    bound: Vec<Option<Var>>,
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node and parameter.
pub struct Gradients {
    nodes: Vec<Option<Matrix>>,
    params: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Matrix> {
        self.params.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn wrt(&self, var: Var) -> Option<&Matrix> {
        self.nodes[var.0].as_ref()
    }

    /// Per-parameter gradients, `None` where the parameter was unused.
    pub fn into_param_grads(self) -> Vec<Option<Matrix>> {
        self.params
    }
}

impl Default for Graph<'static> {
    fn default() -> Self {
        Graph::new(&NO_PARAMS)
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self {
            params,
            bound: vec![None; params.len()],
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Leaf bound to a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.push(self.params.get(id).clone(), Op::Leaf, true);
        self.bound[id.0] = Some(v);
        v
    }

    /// Leaf that does not require gradients.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that requires gradients but is not a stored parameter.
    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matmul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.rg(&[a]);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    fn check_row(&self, op: &'static str, a: Var, row: Var) -> Result<()> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr.0 != 1 || sr.1 != sa.1 {
            return Err(Error::shape(op, sa, sr));
        }
        Ok(())
    }

    /// Adds a `1×c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.check_row("add_row", a, row)?;
        let r = self.value(row).data().to_vec();
        let mut value = self.value(a).clone();
        for i in 0..value.rows() {
            for (x, b) in value.row_mut(i).iter_mut().zip(&r) {
                *x += b;
            }
        }
        let rg = self.rg(&[a, row]);
        Ok(self.push(value, Op::AddRow(a, row), rg))
    }

    /// Multiplies every row of `a` elementwise by a `1×c` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.check_row("mul_row", a, row)?;
        let r = self.value(row).data().to_vec();
        let mut value = self.value(a).clone();
        for i in 0..value.rows() {
            for (x, b) in value.row_mut(i).iter_mut().zip(&r) {
                *x *= b;
            }
        }
        let rg = self.rg(&[a, row]);
        Ok(self.push(value, Op::MulRow(a, row), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).scale(factor);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, factor), rg)
    }

    /// Multiplies `a` by the `1×1` value `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.shape(s) != (1, 1) {
            return Err(Error::shape("scale_by", self.shape(a), self.shape(s)));
        }
        let factor = self.value(s).data()[0];
        let value = self.value(a).scale(factor);
        let rg = self.rg(&[a, s]);
        Ok(self.push(value, Op::ScaleBy(a, s), rg))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        let rg = self.rg(&[a]);
        self.push(value, Op::Exp(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for r in 0..value.rows() {
            softmax_in_place(value.row_mut(r));
        }
        let rg = self.rg(&[a]);
        self.push(value, Op::Softmax(a), rg)
    }

    /// Row softmax where row `i` only sees columns `j <= i`; later columns get
    /// exactly zero weight.
    pub fn causal_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.shape(a);
        if rows != cols {
            return Err(Error::shape("causal_softmax_rows", (rows, cols), (rows, rows)));
        }
        let mut value = self.value(a).clone();
        for r in 0..rows {
            let row = value.row_mut(r);
            softmax_in_place(&mut row[..=r]);
            for v in &mut row[r + 1..] {
                *v = 0.0;
            }
        }
        let rg = self.rg(&[a]);
        // Zeroed entries have zero gradient under the plain softmax rule.
        Ok(self.push(value, Op::Softmax(a), rg))
    }

    /// Per-row standardization (no affine part).
    pub fn layer_norm_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let cols = x.cols() as f64;
        let mut value = x.clone();
        let mut inv_std = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let row = value.row_mut(r);
            let mean = row.iter().sum::<f64>() / cols;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * s;
            }
            inv_std.push(s);
        }
        let rg = self.rg(&[a]);
        self.push(value, Op::LayerNorm(a, inv_std), rg)
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x / (1.0 + (-x).exp()));
        let rg = self.rg(&[a]);
        self.push(value, Op::Silu(a), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|v| self.value(*v)).collect();
        let value = Matrix::concat_rows(&mats)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|v| self.value(*v)).collect();
        let value = Matrix::concat_cols(&mats)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let value = self.value(a).slice_rows(start, end)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::SliceRows(a, start), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let value = self.value(a).slice_cols(start, end)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::SliceCols(a, start), rg))
    }

    /// Zeroes every row whose `keep` flag is false.
    pub fn mask_rows(&mut self, a: Var, keep: &[bool]) -> Result<Var> {
        let (rows, cols) = self.shape(a);
        if keep.len() != rows {
            return Err(Error::shape("mask_rows", (rows, cols), (keep.len(), 1)));
        }
        let mut value = self.value(a).clone();
        for (r, &k) in keep.iter().enumerate() {
            if !k {
                value.row_mut(r).fill(0.0);
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::MaskRows(a, keep.to_vec()), rg))
    }

    /// Multiplies row `t` of `a` by `col[t]`, where `col` is `T×1`.
    pub fn scale_rows(&mut self, a: Var, col: Var) -> Result<Var> {
        let (sa, sc) = (self.shape(a), self.shape(col));
        if sc != (sa.0, 1) {
            return Err(Error::shape("scale_rows", sa, sc));
        }
        let c = self.value(col).data().to_vec();
        let mut value = self.value(a).clone();
        for (r, f) in c.iter().enumerate() {
            for v in value.row_mut(r) {
                *v *= f;
            }
        }
        let rg = self.rg(&[a, col]);
        Ok(self.push(value, Op::ScaleRows(a, col), rg))
    }

    /// Scales every row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let mut value = self.value(a).clone();
        let mut norms = Vec::with_capacity(value.rows());
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(Error::Domain(format!("cannot normalize zero row {r}")));
            }
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::L2NormalizeRows(a, norms), rg))
    }

    /// Row lookup, e.g. a token-embedding table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::InvalidInput(format!(
                "row id {bad} out of range for table with {} rows",
                t.rows()
            )));
        }
        let mut data = Vec::with_capacity(ids.len() * t.cols());
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        let value = Matrix::new(ids.len(), t.cols(), data)?;
        let rg = self.rg(&[table]);
        Ok(self.push(value, Op::GatherRows(table, ids.to_vec()), rg))
    }

    /// Mean over rows of `−log softmax(logits[r])[targets[r]]`, as a `1×1`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let l = self.value(logits);
        if targets.len() != l.rows() || targets.is_empty() {
            return Err(Error::shape("cross_entropy", l.shape(), (targets.len(), 1)));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= l.cols()) {
            return Err(Error::InvalidInput(format!(
                "target {bad} out of range for {} classes",
                l.cols()
            )));
        }
        let mut probs = l.clone();
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = l.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
            softmax_in_place(probs.row_mut(r));
        }
        let value = Matrix::scalar(total / targets.len() as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(value, Op::CrossEntropy(logits, targets.to_vec(), probs), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    /// Affine map `x·w (+ b)`.
    pub fn linear(&mut self, x: Var, w: ParamId, b: Option<ParamId>) -> Result<Var> {
        let w = self.param(w);
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => {
                let b = self.param(b);
                self.add_row(y, b)
            }
            None => Ok(y),
        }
    }

    /// Gradients of the `1×1` node `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::shape("backward", self.shape(loss), (1, 1)));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        let params = self
            .bound
            .iter()
            .map(|b| b.and_then(|v| grads[v.0].clone()))
            .collect();
        Ok(Gradients {
            nodes: grads,
            params,
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) -> Result<()> {
        if !self.wants(v) {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    let ga = matmul(g, &self.value(*b).transpose())?;
                    self.accumulate(grads, *a, ga)?;
                }
                if self.wants(*b) {
                    let gb = matmul(&self.value(*a).transpose(), g)?;
                    self.accumulate(grads, *b, gb)?;
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose())?,
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone())?;
                if self.wants(*row) {
                    self.accumulate(grads, *row, column_sums(g))?;
                }
            }
            Op::MulRow(a, row) => {
                let r = self.value(*row);
                if self.wants(*a) {
                    let mut ga = g.clone();
                    for i in 0..ga.rows() {
                        for (v, s) in ga.row_mut(i).iter_mut().zip(r.data()) {
                            *v *= s;
                        }
                    }
                    self.accumulate(grads, *a, ga)?;
                }
                if self.wants(*row) {
                    let prod = g.hadamard(self.value(*a))?;
                    self.accumulate(grads, *row, column_sums(&prod))?;
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.hadamard(self.value(*b))?)?;
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.hadamard(self.value(*a))?)?;
                }
            }
            Op::Scale(a, f) => self.accumulate(grads, *a, g.scale(*f))?,
            Op::ScaleBy(a, s) => {
                let factor = self.value(*s).data()[0];
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.scale(factor))?;
                }
                if self.wants(*s) {
                    let gs = g.hadamard(self.value(*a))?.sum();
                    self.accumulate(grads, *s, Matrix::scalar(gs))?;
                }
            }
            Op::Exp(a) => self.accumulate(grads, *a, g.hadamard(y)?)?,
            Op::Softmax(a) => {
                let mut ga = g.clone();
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let inner: f64 = g.row(r).iter().zip(yr).map(|(a, b)| a * b).sum();
                    for (v, p) in ga.row_mut(r).iter_mut().zip(yr) {
                        *v = p * (*v - inner);
                    }
                }
                self.accumulate(grads, *a, ga)?;
            }
            Op::LayerNorm(a, inv_std) => {
                let n = y.cols() as f64;
                let mut ga = g.clone();
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let mean_g = gr.iter().sum::<f64>() / n;
                    let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                    for ((v, gv), yv) in ga.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *v = inv_std[r] * (gv - mean_g - yv * mean_gy);
                    }
                }
                self.accumulate(grads, *a, ga)?;
            }
            Op::Silu(a) => {
                let x = self.value(*a);
                let ga = Matrix::from_fn(x.rows(), x.cols(), |r, c| {
                    let xv = x.get(r, c);
                    let s = 1.0 / (1.0 + (-xv).exp());
                    g.get(r, c) * s * (1.0 + xv * (1.0 - s))
                });
                self.accumulate(grads, *a, ga)?;
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let rows = self.shape(*p).0;
                    if self.wants(*p) {
                        self.accumulate(grads, *p, g.slice_rows(start, start + rows)?)?;
                    }
                    start += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let cols = self.shape(*p).1;
                    if self.wants(*p) {
                        self.accumulate(grads, *p, g.slice_cols(start, start + cols)?)?;
                    }
                    start += cols;
                }
            }
            Op::SliceRows(a, start) => {
                if self.wants(*a) {
                    let (rows, cols) = self.shape(*a);
                    let mut ga = Matrix::zeros(rows, cols);
                    ga.data_mut()[start * cols..(start + g.rows()) * cols]
                        .copy_from_slice(g.data());
                    self.accumulate(grads, *a, ga)?;
                }
            }
            Op::SliceCols(a, start) => {
                if self.wants(*a) {
                    let (rows, cols) = self.shape(*a);
                    let mut ga = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        ga.row_mut(r)[*start..start + g.cols()].copy_from_slice(g.row(r));
                    }
                    self.accumulate(grads, *a, ga)?;
                }
            }
            Op::MaskRows(a, keep) => {
                let mut ga = g.clone();
                for (r, &k) in keep.iter().enumerate() {
                    if !k {
                        ga.row_mut(r).fill(0.0);
                    }
                }
                self.accumulate(grads, *a, ga)?;
            }
            Op::ScaleRows(a, col) => {
                let c = self.value(*col);
                if self.wants(*a) {
                    let mut ga = g.clone();
                    for r in 0..ga.rows() {
                        let f = c.data()[r];
                        for v in ga.row_mut(r) {
                            *v *= f;
                        }
                    }
                    self.accumulate(grads, *a, ga)?;
                }
                if self.wants(*col) {
                    let x = self.value(*a);
                    let gc = Matrix::from_fn(x.rows(), 1, |r, _| {
                        g.row(r).iter().zip(x.row(r)).map(|(a, b)| a * b).sum()
                    });
                    self.accumulate(grads, *col, gc)?;
                }
            }
            Op::L2NormalizeRows(a, norms) => {
                let mut ga = g.clone();
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let inner: f64 = g.row(r).iter().zip(yr).map(|(a, b)| a * b).sum();
                    for (v, yv) in ga.row_mut(r).iter_mut().zip(yr) {
                        *v = (*v - yv * inner) / norms[r];
                    }
                }
                self.accumulate(grads, *a, ga)?;
            }
            Op::GatherRows(table, ids) => {
                if self.wants(*table) {
                    let (rows, cols) = self.shape(*table);
                    let mut gt = Matrix::zeros(rows, cols);
                    for (r, &id) in ids.iter().enumerate() {
                        for (v, gv) in gt.row_mut(id).iter_mut().zip(g.row(r)) {
                            *v += gv;
                        }
                    }
                    self.accumulate(grads, *table, gt)?;
                }
            }
            Op::CrossEntropy(logits, targets, probs) => {
                let scale = g.data()[0] / targets.len() as f64;
                let mut gl = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    let row = gl.row_mut(r);
                    row[t] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                self.accumulate(grads, *logits, gl)?;
            }
            Op::Sum(a) => {
                let (rows, cols) = self.shape(*a);
                self.accumulate(grads, *a, Matrix::filled(rows, cols, g.data()[0]))?;
            }
        }
        Ok(())
    }
}

fn column_sums(g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, v) in out.data_mut().iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}
