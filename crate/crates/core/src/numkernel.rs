//! Dense f64 kernels used by the toy decoder and the reductions.
//!
//! Everything here is a pure function of its inputs. Matrix products sum the
//! inner dimension strictly left to right so that two routes computing the
//! same row with the same operands agree bit for bit.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Stabilizer inside the RMS-norm square root.
pub const RMS_EPS: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("shape mismatch in {op}: {left} vs {right}")]
    Shape {
        op: &'static str,
        left: String,
        right: String,
    },
    #[error("softmax row {row} has no allowed entries")]
    DegenerateRow { row: usize },
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
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

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, KernelError> {
        if data.len() != rows * cols {
            return Err(KernelError::Shape {
                op: "from_vec",
                left: format!("{rows}x{cols}"),
                right: format!("{} values", data.len()),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows. Panics on ragged input, so
    /// keep it to literals and tests.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
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

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// New matrix holding the listed rows, in the order given.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &r in idx {
            data.extend_from_slice(self.row(r));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// New matrix holding the listed columns, in the order given.
    pub fn select_cols(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(self.rows * idx.len());
        for r in 0..self.rows {
            let row = self.row(r);
            data.extend(idx.iter().map(|&c| row[c]));
        }
        Matrix {
            rows: self.rows,
            cols: idx.len(),
            data,
        }
    }

    /// Column block `[start, start + width)`.
    pub fn col_block(&self, start: usize, width: usize) -> Matrix {
        let idx: Vec<usize> = (start..start + width).collect();
        self.select_cols(&idx)
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<(), KernelError> {
        if self.shape() != other.shape() {
            return Err(shape_err("add", self, other));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Adds `bias` to every row.
    pub fn add_row_vector(&mut self, bias: &[f64]) -> Result<(), KernelError> {
        if bias.len() != self.cols {
            return Err(KernelError::Shape {
                op: "add_row_vector",
                left: format!("{}x{}", self.rows, self.cols),
                right: format!("len {}", bias.len()),
            });
        }
        for r in 0..self.rows {
            for (a, b) in self.row_mut(r).iter_mut().zip(bias) {
                *a += b;
            }
        }
        Ok(())
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix, KernelError> {
        if self.shape() != other.shape() {
            return Err(shape_err("hadamard", self, other));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

fn shape_err(op: &'static str, a: &Matrix, b: &Matrix) -> KernelError {
    KernelError::Shape {
        op,
        left: format!("{}x{}", a.rows, a.cols),
        right: format!("{}x{}", b.rows, b.cols),
    }
}

/// `a · b`. Each output entry accumulates `a[i,p]·b[p,j]` for p = 0, 1, ...
/// starting from 0.0.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix, KernelError> {
    if a.cols != b.rows {
        return Err(shape_err("matmul", a, b));
    }
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * m..(i + 1) * m];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b.data[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
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

/// Square boolean table: `allowed(q, k)` means query q may attend to key k.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    n: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    /// `allowed(q, k) = k <= q`.
    pub fn causal(n: usize) -> Self {
        Self::from_fn(n, |_, _| true)
    }

    /// Causal mask intersected with `keep`. The diagonal is always retained.
    pub fn from_fn(n: usize, mut keep: impl FnMut(usize, usize) -> bool) -> Self {
        let mut allowed = vec![false; n * n];
        for q in 0..n {
            for k in 0..=q {
                allowed[q * n + k] = k == q || keep(q, k);
            }
        }
        Self { n, allowed }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn allowed(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.n + k]
    }

    pub fn row(&self, q: usize) -> &[bool] {
        &self.allowed[q * self.n..(q + 1) * self.n]
    }

    /// Number of allowed (query, key) pairs.
    pub fn pair_count(&self) -> usize {
        self.allowed.iter().filter(|&&a| a).count()
    }

    /// Self-attendance on the diagonal and nothing above it.
    pub fn is_well_formed(&self) -> bool {
        (0..self.n).all(|q| self.allowed(q, q) && (q + 1..self.n).all(|k| !self.allowed(q, k)))
    }
}

/// Row-wise softmax restricted to the allowed entries of `mask`; disallowed
/// entries come out as exactly 0.
pub fn masked_softmax_rows(scores: &Matrix, mask: &AttentionMask) -> Result<Matrix, KernelError> {
    let n = mask.len();
    if scores.shape() != (n, n) {
        return Err(KernelError::Shape {
            op: "masked_softmax_rows",
            left: format!("{}x{}", scores.rows, scores.cols),
            right: format!("mask {n}"),
        });
    }
    let mut out = Matrix::zeros(n, n);
    for q in 0..n {
        let row = scores.row(q);
        let allow = mask.row(q);
        let max = row
            .iter()
            .zip(allow)
            .filter(|(_, &a)| a)
            .map(|(&v, _)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(KernelError::DegenerateRow { row: q });
        }
        let orow = out.row_mut(q);
        let mut sum = 0.0;
        for k in 0..n {
            if allow[k] {
                let e = (row[k] - max).exp();
                orow[k] = e;
                sum += e;
            }
        }
        for v in orow.iter_mut() {
            *v /= sum;
        }
    }
    Ok(out)
}

/// Scales each row by `1/sqrt(mean(x²) + eps)` and then by `gain`.
pub fn rms_norm(x: &Matrix, gain: &[f64]) -> Result<Matrix, KernelError> {
    if gain.len() != x.cols {
        return Err(KernelError::Shape {
            op: "rms_norm",
            left: format!("{}x{}", x.rows, x.cols),
            right: format!("gain {}", gain.len()),
        });
    }
    let mut out = x.clone();
    for r in 0..x.rows {
        let row = out.row_mut(r);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / gain.len() as f64;
        let inv = 1.0 / (ms + RMS_EPS).sqrt();
        for (v, g) in row.iter_mut().zip(gain) {
            *v = *v * inv * g;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Silu,
}

impl Activation {
    #[inline]
    pub fn apply_scalar(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Silu => x / (1.0 + (-x).exp()),
        }
    }
}

pub fn activation(x: &Matrix, kind: Activation) -> Matrix {
    let mut out = x.clone();
    activation_in_place(&mut out, kind);
    out
}

pub fn activation_in_place(x: &mut Matrix, kind: Activation) {
    for v in &mut x.data {
        *v = kind.apply_scalar(*v);
    }
}
