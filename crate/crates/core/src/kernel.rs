//! Dense numeric primitives shared by every other module.
//!
//! All kernels operate on row-major f32 data and accumulate reductions in a
//! fixed left-to-right order, so a given input always produces bit-identical
//! output. That property is load-bearing: the decode loop, the weight file
//! format and the report writer all promise byte-stable results across runs.
//! Keep any future vectorization per-cell order-preserving.

use crate::error::{EdlmError, Result};

/// Dense row-major f32 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(EdlmError::config(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix by filling rows in order from a generator.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f32) {
        self.data[r * self.cols + c] = value;
    }

    pub fn copy_row_from(&mut self, r: usize, src: &[f32]) {
        self.row_mut(r).copy_from_slice(src);
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Matrix product with per-cell accumulation in ascending-k order.
///
/// The loop nest is (i, k, j) for cache locality; each output cell still
/// receives its k terms in ascending order, so the result is bitwise
/// identical to the textbook (i, j, k) triple loop.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(EdlmError::config(format!(
            "matmul dimension mismatch: {}x{} * {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let a_row = a.row(i);
        let out_row = out.row_mut(i);
        for (k, &aik) in a_row.iter().enumerate() {
            let b_row = b.row(k);
            for (o, &bkj) in out_row.iter_mut().zip(b_row.iter()) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// `a * b^T`; used for attention scores and the tied output head.
pub fn matmul_transpose_b(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(EdlmError::config(format!(
            "matmul_transpose_b dimension mismatch: {}x{} * ({}x{})^T",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let a_row = a.row(i);
        let out_row = out.row_mut(i);
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = b.row(j);
            let mut acc = 0.0f32;
            for (x, y) in a_row.iter().zip(b_row.iter()) {
                acc += x * y;
            }
            *o = acc;
        }
    }
    Ok(out)
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(z: &Matrix) -> Matrix {
    let mut out = z.clone();
    for r in 0..out.rows {
        softmax_in_place(out.row_mut(r));
    }
    out
}

/// Softmax of a single row, in place. Max subtraction keeps exp in range.
pub fn softmax_in_place(row: &mut [f32]) {
    if row.is_empty() {
        return;
    }
    let mut max = row[0];
    for &x in row.iter().skip(1) {
        if x > max {
            max = x;
        }
    }
    let mut sum = 0.0f32;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// Euclidean norm, accumulated left to right.
pub fn l2_norm(v: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for &x in v {
        acc += x * x;
    }
    acc.sqrt()
}

/// Cosine similarity clamped to [-1, 1].
///
/// A vector with norm below 1e-12 carries no measurable change, so the
/// degenerate result is defined as 1.0 (it must never look like drift).
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f32> {
    if a.len() != b.len() {
        return Err(EdlmError::config(format!(
            "cosine_similarity length mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na < 1e-12 || nb < 1e-12 {
        return Ok(1.0);
    }
    let mut dot = 0.0f32;
    for (x, y) in a.iter().zip(b.iter()) {
        dot += x * y;
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Index of the largest element; ties resolve to the lowest index.
pub fn argmax(v: &[f32]) -> Result<usize> {
    if v.is_empty() {
        return Err(EdlmError::config("argmax of empty vector"));
    }
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Layer normalization with epsilon 1e-5 inside the square root.
pub fn layer_norm(x: &[f32], gain: &[f32], bias: &[f32]) -> Vec<f32> {
    debug_assert_eq!(x.len(), gain.len());
    debug_assert_eq!(x.len(), bias.len());
    let n = x.len() as f32;
    let mut mean = 0.0f32;
    for &v in x {
        mean += v;
    }
    mean /= n;
    let mut var = 0.0f32;
    for &v in x {
        let d = v - mean;
        var += d * d;
    }
    var /= n;
    let denom = (var + 1e-5).sqrt();
    x.iter()
        .zip(gain.iter().zip(bias.iter()))
        .map(|(&v, (&g, &b))| (v - mean) / denom * g + b)
        .collect()
}

/// Power-iteration estimate of the spectral norm of `w`.
///
/// Iterates v <- W^T W v from a fixed, slightly tilted start vector (pure
/// function of the input, no seed) and returns ||W v|| after the final
/// normalization. The Rayleigh quotient is nondecreasing over iterations in
/// exact arithmetic, and the estimate approaches the true norm from below.
pub fn spectral_norm_estimate(w: &Matrix, iters: usize) -> f32 {
    assert!(iters >= 1, "spectral_norm_estimate requires iters >= 1");
    let n = w.cols();
    if n == 0 || w.rows() == 0 {
        return 0.0;
    }
    // Tilted start avoids being exactly orthogonal to the top singular vector.
    let mut v: Vec<f32> = (0..n).map(|i| 1.0 + (i as f32) * 1e-3).collect();
    normalize(&mut v);
    let mut estimate = 0.0f32;
    for _ in 0..iters {
        let u = apply(w, &v);
        estimate = l2_norm(&u);
        let mut next = apply_transpose(w, &u);
        let norm = l2_norm(&next);
        if norm < 1e-30 {
            return 0.0;
        }
        for x in next.iter_mut() {
            *x /= norm;
        }
        v = next;
    }
    estimate
}

fn apply(w: &Matrix, v: &[f32]) -> Vec<f32> {
    let mut out = vec![0.0f32; w.rows()];
    for (i, o) in out.iter_mut().enumerate() {
        let row = w.row(i);
        let mut acc = 0.0f32;
        for (x, y) in row.iter().zip(v.iter()) {
            acc += x * y;
        }
        *o = acc;
    }
    out
}

fn apply_transpose(w: &Matrix, u: &[f32]) -> Vec<f32> {
    let mut out = vec![0.0f32; w.cols()];
    for (i, &ui) in u.iter().enumerate() {
        let row = w.row(i);
        for (o, &x) in out.iter_mut().zip(row.iter()) {
            *o += x * ui;
        }
    }
    out
}

fn normalize(v: &mut [f32]) {
    let norm = l2_norm(v);
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
}
