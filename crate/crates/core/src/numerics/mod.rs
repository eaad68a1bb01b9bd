//! Dense kernels, layer primitives, losses, reverse-mode gradients and the
//! optimizer used to train the multi-task network.
//!
//! Everything is `f64`. Matrices are row-major.

mod init;
mod optim;
mod tape;

use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use init::{init_param, init_param_seeded, Param, ParamShape};
pub use optim::{Adam, AdamConfig};
pub use tape::{GradTape, Gradients, Var};

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
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
        for k in 0..n {
            m.data[k * n + k] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::from_vec",
                format!("{rows}x{cols}"),
                format!("{} values", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (r, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(Error::shape(
                    "Matrix::from_rows",
                    format!("row 0 has {cols} columns"),
                    format!("row {r} has {}", row.len()),
                ));
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Dense real vector.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl From<Vec<f64>> for Vector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

impl From<&[f64]> for Vector {
    fn from(v: &[f64]) -> Self {
        Self(v.to_vec())
    }
}

impl Deref for Vector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Vector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

/// Indices of the non-zero entries when `x` is sparse enough for the
/// sparse matvec path to pay off.
pub(crate) fn sparse_support(x: &[f64]) -> Option<Vec<usize>> {
    let nnz = x.iter().filter(|v| **v != 0.0).count();
    if nnz * 4 < x.len() {
        Some(
            x.iter()
                .enumerate()
                .filter(|(_, v)| **v != 0.0)
                .map(|(k, _)| k)
                .collect(),
        )
    } else {
        None
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for k in 0..chunks {
        let j = 4 * k;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut tail = 0.0;
    for j in 4 * chunks..a.len() {
        tail += a[j] * b[j];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `out = w·x (+ b)`, skipping zero entries of `x` when given a support.
pub(crate) fn affine_into(
    w: &Matrix,
    x: &[f64],
    b: Option<&[f64]>,
    support: Option<&[usize]>,
    out: &mut [f64],
) {
    for (r, o) in out.iter_mut().enumerate() {
        let row = w.row(r);
        let mut acc = match support {
            Some(nz) => nz.iter().map(|&c| row[c] * x[c]).sum(),
            None => dot(row, x),
        };
        if let Some(b) = b {
            acc += b[r];
        }
        *o = acc;
    }
}

/// Row-major `c = a·b`, or `c += a·b` when `accumulate`. `a` is `m×k`
/// (stored `k×m` when `a_t`), `b` is `k×n` (stored `n×k` when `b_t`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the assert above keeps every strided access in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn check_affine(w: &Matrix, x: &[f64], b: Option<&[f64]>) -> Result<()> {
    if w.cols != x.len() {
        return Err(Error::shape(
            "affine",
            format!("W {}x{}", w.rows, w.cols),
            format!("x dim {}", x.len()),
        ));
    }
    if let Some(b) = b {
        if b.len() != w.rows {
            return Err(Error::shape(
                "affine",
                format!("W {}x{}", w.rows, w.cols),
                format!("b dim {}", b.len()),
            ));
        }
    }
    Ok(())
}

/// `W·x + b`.
pub fn affine(w: &Matrix, x: &[f64], b: &[f64]) -> Result<Vector> {
    check_affine(w, x, Some(b))?;
    let mut out = vec![0.0; w.rows];
    let support = sparse_support(x);
    affine_into(w, x, Some(b), support.as_deref(), &mut out);
    Ok(out.into())
}

/// `W·x` without a bias term.
pub fn matvec(w: &Matrix, x: &[f64]) -> Result<Vector> {
    check_affine(w, x, None)?;
    let mut out = vec![0.0; w.rows];
    let support = sparse_support(x);
    affine_into(w, x, None, support.as_deref(), &mut out);
    Ok(out.into())
}

pub fn relu(x: &[f64]) -> Vector {
    x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect::<Vec<_>>().into()
}

/// Numerically stable softmax. Empty input maps to an empty output.
pub fn softmax(x: &[f64]) -> Vector {
    let mut out = x.to_vec();
    softmax_in_place(&mut out);
    out.into()
}

pub(crate) fn softmax_in_place(x: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in x.iter_mut() {
        *v /= total;
    }
}

/// `log Σ exp(x)` with the max shifted out.
pub(crate) fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Element-wise product.
pub fn hadamard(a: &[f64], b: &[f64]) -> Result<Vector> {
    if a.len() != b.len() {
        return Err(Error::shape("hadamard", a.len(), b.len()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).collect::<Vec<_>>().into())
}

/// Mean squared error `(1/n) Σ (target − pred)²`.
pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::shape("mse_loss", pred.len(), target.len()));
    }
    if pred.is_empty() {
        return Err(Error::Domain("mse_loss of an empty vector".into()));
    }
    let sum: f64 = pred.iter().zip(target).map(|(p, t)| (t - p) * (t - p)).sum();
    Ok(sum / pred.len() as f64)
}

/// `−log softmax(logits)[class]`, evaluated in log space.
pub fn cross_entropy_loss(logits: &[f64], class: usize) -> Result<f64> {
    if class >= logits.len() {
        return Err(Error::Index {
            what: "logits",
            index: class,
            len: logits.len(),
        });
    }
    Ok(log_sum_exp(logits) - logits[class])
}
