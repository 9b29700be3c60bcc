//! Dense row-major matrices, attention primitives, a seeded PRNG and the
//! central finite-difference oracle used to validate every trainable module.
//!
//! All arithmetic is carried out in `f64`. Multi-head attention is expressed
//! with 2-D matrices only: heads are contiguous column blocks of width
//! `d / heads` (see [`crate::nn`]).

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::InvalidInput(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::InvalidInput(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn row_vector(values: &[f64]) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    /// I.i.d. Gaussian entries with the given standard deviation.
    pub fn randn(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Self {
        Self::from_fn(rows, cols, |_, _| std * rng.normal())
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let cols = self.cols;
        &mut self.data[r * cols..(r + 1) * cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        matmul(self, other)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    fn check_same(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(op, self.shape(), other.shape()));
        }
        Ok(())
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same(other, "add")?;
        Ok(self.zip_map(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same(other, "sub")?;
        Ok(self.zip_map(other, |a, b| a - b))
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same(other, "hadamard")?;
        Ok(self.zip_map(other, |a, b| a * b))
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        self.check_same(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, factor: f64) -> Matrix {
        self.map(|v| v * factor)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_map(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Rows `[start, end)`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Matrix> {
        if start > end || end > self.rows {
            return Err(Error::InvalidInput(format!(
                "row range {start}..{end} out of bounds for {} rows",
                self.rows
            )));
        }
        Ok(Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        })
    }

    /// Columns `[start, end)`.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Matrix> {
        if start > end || end > self.cols {
            return Err(Error::InvalidInput(format!(
                "column range {start}..{end} out of bounds for {} columns",
                self.cols
            )));
        }
        Ok(Matrix::from_fn(self.rows, end - start, |r, c| {
            self.get(r, start + c)
        }))
    }

    pub fn concat_rows(parts: &[&Matrix]) -> Result<Matrix> {
        let cols = parts.first().map_or(0, |m| m.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for m in parts {
            if m.cols != cols {
                return Err(Error::shape("concat_rows", parts[0].shape(), m.shape()));
            }
            data.extend_from_slice(&m.data);
            rows += m.rows;
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn concat_cols(parts: &[&Matrix]) -> Result<Matrix> {
        let rows = parts.first().map_or(0, |m| m.rows);
        if let Some(bad) = parts.iter().find(|m| m.rows != rows) {
            return Err(Error::shape("concat_cols", parts[0].shape(), bad.shape()));
        }
        let cols = parts.iter().map(|m| m.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for m in parts {
                data.extend_from_slice(m.row(r));
            }
        }
        Ok(Matrix { rows, cols, data })
    }
}

/// Standard matrix product `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let out_row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b.data[p * m..(p + 1) * m];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    Ok(Matrix {
        rows: n,
        cols: m,
        data: out,
    })
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..m.rows {
        softmax_in_place(out.row_mut(r));
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// `softmax(q·kᵀ / √d) · v` with `d = q.cols`.
pub fn scaled_dot_attention(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<Matrix> {
    if q.cols != k.cols {
        return Err(Error::shape("scaled_dot_attention(q, k)", q.shape(), k.shape()));
    }
    if k.rows != v.rows {
        return Err(Error::shape("scaled_dot_attention(k, v)", k.shape(), v.shape()));
    }
    let scores = matmul(q, &k.transpose())?.scale(1.0 / (q.cols as f64).sqrt());
    matmul(&softmax_rows(&scores), v)
}

pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

pub fn l2_norm(u: &[f64]) -> f64 {
    dot(u, u).sqrt()
}

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::shape("cosine_similarity", (1, u.len()), (1, v.len())));
    }
    let (nu, nv) = (l2_norm(u), l2_norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Domain("cosine similarity of a zero vector".into()));
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Central finite differences `(f(x + εeᵢ) − f(x − εeᵢ)) / 2ε` for every
/// coordinate of `x`.
pub fn finite_diff_gradient<F>(mut f: F, x: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::Domain(format!("finite-difference step must be > 0, got {eps}")));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let plus = f(&probe)?;
        probe[i] = x[i] - eps;
        let minus = f(&probe)?;
        probe[i] = x[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite objective while probing coordinate {i}"
            )));
        }
        grad.push((plus - minus) / (2.0 * eps));
    }
    Ok(grad)
}

/// Denominator floor for [`relative_error`]; below it the comparison is
/// effectively absolute.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|, RELATIVE_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Worst analytic-vs-numeric disagreement over a set of probes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub max_relative_error: f64,
    /// Parameter name and flat index of the worst probe.
    pub worst_parameter: String,
    pub worst_parameter_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub probes: usize,
}

impl GradReport {
    pub fn record(&mut self, name: &str, index: usize, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        self.probes += 1;
        if self.probes == 1 || err > self.max_relative_error {
            self.max_relative_error = err;
            self.worst_parameter = name.to_string();
            self.worst_parameter_index = index;
            self.analytic = analytic;
            self.numeric = numeric;
        }
    }

    pub fn merge(&mut self, other: &GradReport) {
        let probes = self.probes + other.probes;
        if other.probes > 0 && (self.probes == 0 || other.max_relative_error > self.max_relative_error)
        {
            *self = other.clone();
        }
        self.probes = probes;
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error <= tolerance
    }
}

/// Seeded pseudo-random generator.
///
/// Backed by ChaCha8 (`rand_chacha`) keyed from the 64-bit seed through
/// `SeedableRng::seed_from_u64`, whose output stream is specified
/// independently of platform and word size. Gaussian draws use
/// `rand_distr::StandardNormal`.
#[derive(Clone, Debug)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform integer in `[0, n)`; `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    /// Derives an independent generator, e.g. one per component.
    pub fn fork(&mut self) -> Rng {
        Rng::new(self.next_u64())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        Matrix::from_fn(a.rows(), b.cols(), |i, j| {
            let mut s = 0.0;
            for p in 0..a.cols() {
                s += a.get(i, p) * b.get(p, j);
            }
            s
        })
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let mut rng = Rng::new(1);
        let m = Matrix::randn(3, 5, 1.0, &mut rng);
        assert_eq!(matmul(&Matrix::identity(3), &m).unwrap(), m);
        let six = matmul(&Matrix::scalar(2.0), &Matrix::scalar(3.0)).unwrap();
        assert_eq!(six.data(), &[6.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Rng::new(7);
        let a = Matrix::randn(5, 4, 1.0, &mut rng);
        let b = Matrix::randn(4, 3, 1.0, &mut rng);
        let got = matmul(&a, &b).unwrap();
        let want = reference_matmul(&a, &b);
        for (g, w) in got.data().iter().zip(want.data()) {
            assert!((g - w).abs() <= 1e-12);
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Matrix::zeros(2, 3), &Matrix::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(2, 3)"), "{msg}");
        assert!(matches!(err, Error::Shape { left: (2, 3), right: (2, 3), .. }));
    }

    #[test]
    fn softmax_closed_forms() {
        let m = Matrix::from_rows(&[[0.0, 0.0], [2f64.ln(), 0.0], [1000.0, 0.0]]).unwrap();
        let s = softmax_rows(&m);
        assert_eq!(s.row(0), &[0.5, 0.5]);
        assert!((s.get(1, 0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.get(1, 1) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(s.row(2), &[1.0, 0.0]);
    }

    #[test]
    fn attention_single_key_returns_value() {
        let mut rng = Rng::new(3);
        let q = Matrix::randn(4, 3, 1.0, &mut rng);
        let k = Matrix::randn(1, 3, 1.0, &mut rng);
        let v = Matrix::randn(1, 5, 1.0, &mut rng);
        let out = scaled_dot_attention(&q, &k, &v).unwrap();
        for r in 0..4 {
            assert_eq!(out.row(r), v.row(0));
        }
    }

    #[test]
    fn attention_identical_keys_give_column_mean() {
        let mut rng = Rng::new(4);
        let q = Matrix::randn(2, 3, 1.0, &mut rng);
        let key = [0.3, -0.2, 0.9];
        let k = Matrix::from_rows(&[key, key, key, key]).unwrap();
        let v = Matrix::randn(4, 2, 1.0, &mut rng);
        let out = scaled_dot_attention(&q, &k, &v).unwrap();
        for c in 0..2 {
            let mean = (0..4).map(|r| v.get(r, c)).sum::<f64>() / 4.0;
            for r in 0..2 {
                assert!((out.get(r, c) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_matches_two_step_reference() {
        let mut rng = Rng::new(5);
        let q = Matrix::randn(3, 4, 1.0, &mut rng);
        let k = Matrix::randn(5, 4, 1.0, &mut rng);
        let v = Matrix::randn(5, 6, 1.0, &mut rng);
        // explicit weights, computed without the library softmax
        let mut w = Matrix::zeros(3, 5);
        for i in 0..3 {
            let scores: Vec<f64> = (0..5)
                .map(|j| (0..4).map(|p| q.get(i, p) * k.get(j, p)).sum::<f64>() / 2.0)
                .collect();
            let z: f64 = scores.iter().map(|s| s.exp()).sum();
            for j in 0..5 {
                w.set(i, j, scores[j].exp() / z);
            }
        }
        let want = reference_matmul(&w, &v);
        let got = scaled_dot_attention(&q, &k, &v).unwrap();
        for (g, w) in got.data().iter().zip(want.data()) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_shape_errors() {
        let a = Matrix::zeros(2, 3);
        assert!(scaled_dot_attention(&a, &Matrix::zeros(2, 4), &Matrix::zeros(2, 1)).is_err());
        assert!(scaled_dot_attention(&a, &Matrix::zeros(2, 3), &Matrix::zeros(3, 1)).is_err());
    }

    #[test]
    fn cosine_cases() {
        assert!((cosine_similarity(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_similarity(&[1.0, -2.0], &[-1.0, 2.0]).unwrap() + 1.0).abs() < 1e-15);
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn finite_diff_basic_cases() {
        let g = finite_diff_gradient(|x| Ok(x[0] * x[0]), &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
        let g = finite_diff_gradient(|_| Ok(4.2), &[1.0, -2.0, 3.0], 1e-5).unwrap();
        assert_eq!(g, vec![0.0; 3]);
        assert!(finite_diff_gradient(|x| Ok(x[0]), &[1.0], 0.0).is_err());
        assert!(matches!(
            finite_diff_gradient(|x| Ok(if x[0] > 1.0 { f64::NAN } else { x[0] }), &[1.0], 1e-5),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn finite_diff_matches_quadratic_form_gradient() {
        let mut rng = Rng::new(11);
        let a = Matrix::randn(4, 3, 1.0, &mut rng);
        let x = [0.4, -1.3, 0.7];
        let f = |x: &[f64]| {
            let ax = matmul(&a, &Matrix::new(3, 1, x.to_vec())?)?;
            Ok(ax.data().iter().map(|v| v * v).sum())
        };
        // analytic 2 Aᵀ A x
        let ata = matmul(&a.transpose(), &a).unwrap();
        let analytic = matmul(&ata, &Matrix::new(3, 1, x.to_vec()).unwrap())
            .unwrap()
            .scale(2.0);
        for eps in [1e-6, 1e-5, 1e-4] {
            let numeric = finite_diff_gradient(f, &x, eps).unwrap();
            for (n, a) in numeric.iter().zip(analytic.data()) {
                assert!(relative_error(*a, *n) < 1e-6, "eps {eps}: {a} vs {n}");
            }
        }
    }

    #[test]
    fn rng_is_reproducible() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
            assert_eq!(a.normal().to_bits(), b.normal().to_bits());
        }
        assert_ne!(Rng::new(1).next_u64(), Rng::new(2).next_u64());
    }

    #[test]
    fn grad_report_tracks_worst() {
        let mut r = GradReport::default();
        r.record("a", 0, 1.0, 1.0);
        r.record("b", 3, 1.0, 1.1);
        r.record("c", 1, 2.0, 2.0);
        assert_eq!(r.worst_parameter, "b");
        assert_eq!(r.probes, 3);
        assert!(!r.passes(1e-4));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
            proptest::collection::vec(-3.0f64..3.0, rows * cols)
                .prop_map(move |d| Matrix::new(rows, cols, d).unwrap())
        }

        proptest! {
            #[test]
            fn matmul_is_associative(a in matrix(3, 4), b in matrix(4, 2), c in matrix(2, 5)) {
                let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
                let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
                let scale = left.data().iter().map(|v| v.abs()).fold(1.0, f64::max);
                for (l, r) in left.data().iter().zip(right.data()) {
                    prop_assert!((l - r).abs() <= 1e-9 * scale);
                }
            }

            #[test]
            fn softmax_rows_sum_to_one_and_shift_invariant(m in matrix(4, 6), shift in -50.0f64..50.0) {
                let s = softmax_rows(&m);
                let shifted = softmax_rows(&m.map(|v| v + shift));
                for r in 0..4 {
                    prop_assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    prop_assert!(s.row(r).iter().all(|&v| v >= 0.0));
                    for (a, b) in s.row(r).iter().zip(shifted.row(r)) {
                        prop_assert!((a - b).abs() < 1e-12);
                    }
                }
            }

            #[test]
            fn attention_is_convex_in_values(q in matrix(3, 4), k in matrix(5, 4), v in matrix(5, 3)) {
                let out = scaled_dot_attention(&q, &k, &v).unwrap();
                for c in 0..3 {
                    let col: Vec<f64> = (0..5).map(|r| v.get(r, c)).collect();
                    let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                    let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    for r in 0..3 {
                        prop_assert!(out.get(r, c) >= lo - 1e-12 && out.get(r, c) <= hi + 1e-12);
                    }
                }
            }
        }
    }
}
