//! Dense row-major `f32` matrices and the handful of kernels the model and
//! quantizers need.
//!
//! Reductions (dot products, norms, means) accumulate in `f64`. Matrix
//! products are parallelised over output rows only, so every element is
//! produced by the same sequential reduction regardless of thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default epsilon for RMS normalisation.
pub const DEFAULT_NORM_EPS: f64 = 1e-6;

/// Rows below this many multiply-adds are computed on the calling thread.
const PAR_THRESHOLD: usize = 1 << 14;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    /// Builds a matrix from row-major data, rejecting empty shapes,
    /// length mismatches and non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::EmptyInput("Matrix::new"));
        }
        if data.len() != rows * cols {
            return Err(Error::LengthMismatch {
                op: "Matrix::new",
                expected: rows * cols,
                actual: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Matrix::new"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidConfig("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    /// Internal constructor for kernels whose outputs are finite by construction.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Returns rows `start..end` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        assert!(start < end && end <= self.rows);
        Matrix::from_raw(
            end - start,
            self.cols,
            self.data[start * self.cols..end * self.cols].to_vec(),
        )
    }

    /// Returns columns `start..end` as a new matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Matrix {
        assert!(start < end && end <= self.cols);
        let w = end - start;
        let mut out = Vec::with_capacity(self.rows * w);
        for r in 0..self.rows {
            out.extend_from_slice(&self.row(r)[start..end]);
        }
        Matrix::from_raw(self.rows, w, out)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Matrix {
        Matrix::from_raw(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn scale(&self, k: f32) -> Matrix {
        self.map(|v| v * k)
    }

    /// Squared Frobenius norm, accumulated in `f64`.
    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|&v| (v as f64) * (v as f64)).sum()
    }

    /// Squared Frobenius norm of `self - other`.
    pub fn diff_frobenius_sq(&self, other: &Matrix) -> Result<f64> {
        same_shape("diff_frobenius_sq", self, other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> Result<f32> {
        same_shape("max_abs_diff", self, other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }

    /// Multiplies row `i` by `factors[i]`.
    pub fn scale_rows(&self, factors: &[f32]) -> Result<Matrix> {
        if factors.len() != self.rows {
            return Err(Error::LengthMismatch {
                op: "scale_rows",
                expected: self.rows,
                actual: factors.len(),
            });
        }
        let mut out = self.clone();
        for (r, &f) in factors.iter().enumerate() {
            out.row_mut(r).iter_mut().for_each(|v| *v *= f);
        }
        Ok(out)
    }

    /// Multiplies column `j` by `factors[j]`.
    pub fn scale_cols(&self, factors: &[f32]) -> Result<Matrix> {
        if factors.len() != self.cols {
            return Err(Error::LengthMismatch {
                op: "scale_cols",
                expected: self.cols,
                actual: factors.len(),
            });
        }
        let mut out = self.clone();
        for r in 0..self.rows {
            out.row_mut(r)
                .iter_mut()
                .zip(factors)
                .for_each(|(v, &f)| *v *= f);
        }
        Ok(out)
    }

    /// Divides column `j` by `divisors[j]`.
    pub fn div_cols(&self, divisors: &[f32]) -> Result<Matrix> {
        if divisors.len() != self.cols {
            return Err(Error::LengthMismatch {
                op: "div_cols",
                expected: self.cols,
                actual: divisors.len(),
            });
        }
        let mut out = self.clone();
        for r in 0..self.rows {
            out.row_mut(r)
                .iter_mut()
                .zip(divisors)
                .for_each(|(v, &d)| *v /= d);
        }
        Ok(out)
    }

    /// Adds `bias` to every row.
    pub fn add_row_vector(&self, bias: &[f32]) -> Result<Matrix> {
        if bias.len() != self.cols {
            return Err(Error::LengthMismatch {
                op: "add_row_vector",
                expected: self.cols,
                actual: bias.len(),
            });
        }
        let mut out = self.clone();
        for r in 0..self.rows {
            out.row_mut(r).iter_mut().zip(bias).for_each(|(v, &b)| *v += b);
        }
        Ok(out)
    }
}

fn same_shape(op: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

#[inline]
/// f64-accumulated dot product over the common prefix of `a` and `b`.
///
/// Eight interleaved partial sums are combined in a fixed tree, so the
/// result depends only on the inputs, never on threading.
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in ca.by_ref().zip(cb.by_ref()) {
        for i in 0..8 {
            acc[i] += x[i] as f64 * y[i] as f64;
        }
    }
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(&x, &y)| x as f64 * y as f64)
        .sum();
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

fn check_finite(op: &'static str, m: Matrix) -> Result<Matrix> {
    if m.is_finite() {
        Ok(m)
    } else {
        Err(Error::NonFinite(op))
    }
}

/// `a · b` with `a: m×k`, `b: k×n`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    matmul_bt(a, &transpose(b)).map_err(|e| match e {
        Error::NonFinite(_) => Error::NonFinite("matmul"),
        other => other,
    })
}

/// `a · bᵀ` with `a: m×k`, `b: n×k`. This is the layout of every
/// `X · Wᵀ` projection in the model.
pub fn matmul_bt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::ShapeMismatch {
            op: "matmul_bt",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let n = b.rows;
    let mut out = vec![0.0f32; a.rows * n];
    let kernel = |(r, out_row): (usize, &mut [f32])| {
        let ar = a.row(r);
        for (c, o) in out_row.iter_mut().enumerate() {
            *o = dot(ar, b.row(c)) as f32;
        }
    };
    if a.rows * n * a.cols >= PAR_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(kernel);
    } else {
        out.chunks_mut(n).enumerate().for_each(kernel);
    }
    check_finite("matmul_bt", Matrix::from_raw(a.rows, n, out))
}

/// `Σ_i a[i,j]·b[i,j]`.
pub fn col_dot(a: &Matrix, b: &Matrix, j: usize) -> Result<f64> {
    same_shape("col_dot", a, b)?;
    if j >= a.cols {
        return Err(Error::IndexOutOfRange {
            op: "col_dot",
            index: j,
            limit: a.cols,
        });
    }
    Ok((0..a.rows)
        .map(|i| a.get(i, j) as f64 * b.get(i, j) as f64)
        .sum())
}

/// All column dot products at once; equal to `col_dot(a, b, j)` for every `j`.
pub fn col_dots(a: &Matrix, b: &Matrix) -> Result<Vec<f64>> {
    same_shape("col_dots", a, b)?;
    let mut acc = vec![0.0f64; a.cols];
    for i in 0..a.rows {
        for ((s, &x), &y) in acc.iter_mut().zip(a.row(i)).zip(b.row(i)) {
            *s += x as f64 * y as f64;
        }
    }
    Ok(acc)
}

/// Row-wise RMS normalisation with gain and additive bias:
/// `y[t] = x[t] / sqrt(mean(x[t]²) + eps) ⊙ gamma + bias`.
pub fn rmsnorm(x: &Matrix, gamma: &[f32], bias: &[f32], eps: f64) -> Result<Matrix> {
    for (v, op) in [(gamma, "rmsnorm gamma"), (bias, "rmsnorm bias")] {
        if v.len() != x.cols {
            return Err(Error::LengthMismatch {
                op,
                expected: x.cols,
                actual: v.len(),
            });
        }
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidConfig(format!("rmsnorm eps must be > 0, got {eps}")));
    }
    let mut out = Vec::with_capacity(x.data.len());
    for r in 0..x.rows {
        let row = x.row(r);
        let ms = row.iter().map(|&v| v as f64 * v as f64).sum::<f64>() / x.cols as f64;
        let inv = (1.0 / (ms + eps).sqrt()) as f32;
        out.extend(
            row.iter()
                .zip(gamma)
                .zip(bias)
                .map(|((&v, &g), &b)| v * inv * g + b),
        );
    }
    check_finite("rmsnorm", Matrix::from_raw(x.rows, x.cols, out))
}

/// Row softmax with max subtraction.
pub fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for r in 0..x.rows {
        softmax_in_place(out.row_mut(r));
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f64;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v as f64;
    }
    let inv = (1.0 / sum) as f32;
    row.iter_mut().for_each(|v| *v *= inv);
}

#[inline]
pub fn silu_scalar(v: f32) -> f32 {
    v / (1.0 + (-v).exp())
}

pub fn silu(x: &Matrix) -> Matrix {
    x.map(silu_scalar)
}

pub fn add(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    same_shape("add", a, b)?;
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
    check_finite("add", Matrix::from_raw(a.rows, a.cols, data))
}

pub fn sub(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    same_shape("sub", a, b)?;
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect();
    check_finite("sub", Matrix::from_raw(a.rows, a.cols, data))
}

pub fn hadamard(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    same_shape("hadamard", a, b)?;
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
    check_finite("hadamard", Matrix::from_raw(a.rows, a.cols, data))
}

pub fn transpose(x: &Matrix) -> Matrix {
    let mut out = vec![0.0f32; x.data.len()];
    for r in 0..x.rows {
        for c in 0..x.cols {
            out[c * x.rows + r] = x.data[r * x.cols + c];
        }
    }
    Matrix::from_raw(x.cols, x.rows, out)
}

/// Mean of each row.
pub fn row_mean(x: &Matrix) -> Vec<f64> {
    (0..x.rows)
        .map(|r| x.row(r).iter().map(|&v| v as f64).sum::<f64>() / x.cols as f64)
        .collect()
}

/// Population variance of each row.
pub fn row_var(x: &Matrix) -> Vec<f64> {
    row_mean(x)
        .into_iter()
        .enumerate()
        .map(|(r, m)| {
            x.row(r)
                .iter()
                .map(|&v| {
                    let d = v as f64 - m;
                    d * d
                })
                .sum::<f64>()
                / x.cols as f64
        })
        .collect()
}

/// Mean of each column, i.e. over tokens when rows are tokens.
pub fn col_mean(x: &Matrix) -> Vec<f64> {
    let mut acc = vec![0.0f64; x.cols];
    for r in 0..x.rows {
        acc.iter_mut().zip(x.row(r)).for_each(|(a, &v)| *a += v as f64);
    }
    acc.iter_mut().for_each(|a| *a /= x.rows as f64);
    acc
}

/// Population variance of each column.
pub fn col_var(x: &Matrix) -> Vec<f64> {
    let mean = col_mean(x);
    let mut acc = vec![0.0f64; x.cols];
    for r in 0..x.rows {
        for ((a, &v), m) in acc.iter_mut().zip(x.row(r)).zip(&mean) {
            let d = v as f64 - m;
            *a += d * d;
        }
    }
    acc.iter_mut().for_each(|a| *a /= x.rows as f64);
    acc
}
