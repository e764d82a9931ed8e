//! Dense row-major matrices, softmax / cross-entropy, plain SGD and a central
//! finite-difference gradient oracle.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Deref;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Smallest probability used by [`cross_entropy`] before taking the log.
pub const PROB_FLOOR: f64 = 1e-300;

/// Tolerance used when validating externally supplied probability vectors.
pub const PROB_SUM_TOLERANCE: f64 = 1e-9;

/// Row-major dense matrix of finite `f64` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix", into = "RawMatrix")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawMatrix> for Matrix {
    type Error = Error;
    fn try_from(raw: RawMatrix) -> Result<Self> {
        Matrix::new(raw.rows, raw.cols, raw.data)
    }
}

impl From<Matrix> for RawMatrix {
    fn from(m: Matrix) -> Self {
        RawMatrix { rows: m.rows, cols: m.cols, data: m.data }
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!("matrix data length {} does not match {rows}x{cols}", data.len())));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite matrix entry at ({}, {})",
                i / cols.max(1),
                i % cols.max(1)
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    /// Entries drawn i.i.d. from N(0, std²).
    pub fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        Matrix::from_fn(rows, cols, |_, _| normal.sample(rng))
    }

    /// Entries drawn i.i.d. from U(-bound, bound).
    pub fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut Rng) -> Self {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..=bound))
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

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self · x`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }

    /// `selfᵀ · y`.
    pub fn matvec_t(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (i, &yi) in y.iter().enumerate() {
            if yi == 0.0 {
                continue;
            }
            for (o, &w) in out.iter_mut().zip(self.row(i)) {
                *o += w * yi;
            }
        }
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::invalid(format!("matmul shape mismatch {:?} x {:?}", self.shape(), other.shape())));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other.get(k, j);
                }
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// `self += scale · u vᵀ`.
    pub fn add_outer(&mut self, scale: f64, u: &[f64], v: &[f64]) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        for (i, &ui) in u.iter().enumerate() {
            let s = scale * ui;
            if s == 0.0 {
                continue;
            }
            let row = &mut self.data[i * self.cols..(i + 1) * self.cols];
            for (r, &vj) in row.iter_mut().zip(v) {
                *r += s * vj;
            }
        }
    }

    pub fn scale_in_place(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    /// Columns `[start, end)` as a new matrix.
    pub fn col_slice(&self, start: usize, end: usize) -> Matrix {
        Matrix::from_fn(self.rows, end - start, |i, j| self.get(i, start + j))
    }

    /// Rows `[start, end)` as a new matrix.
    pub fn row_slice(&self, start: usize, end: usize) -> Matrix {
        Matrix { rows: end - start, cols: self.cols, data: self.data[start * self.cols..end * self.cols].to_vec() }
    }

    pub fn set_col_slice(&mut self, start: usize, block: &Matrix) {
        assert_eq!(block.rows, self.rows);
        assert!(start + block.cols <= self.cols);
        for i in 0..self.rows {
            for j in 0..block.cols {
                self.set(i, start + j, block.get(i, j));
            }
        }
    }

    pub fn set_row_slice(&mut self, start: usize, block: &Matrix) {
        assert_eq!(block.cols, self.cols);
        assert!(start + block.rows <= self.rows);
        self.data[start * self.cols..(start + block.rows) * self.cols].copy_from_slice(&block.data);
    }

    /// Appends the columns of `extra` on the right.
    pub fn append_cols(&mut self, extra: &Matrix) -> Result<()> {
        if extra.rows != self.rows {
            return Err(Error::invalid("append_cols row count mismatch"));
        }
        let cols = self.cols + extra.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for i in 0..self.rows {
            data.extend_from_slice(self.row(i));
            data.extend_from_slice(extra.row(i));
        }
        self.cols = cols;
        self.data = data;
        Ok(())
    }

    /// Appends the rows of `extra` at the bottom.
    pub fn append_rows(&mut self, extra: &Matrix) -> Result<()> {
        if extra.cols != self.cols && self.rows != 0 {
            return Err(Error::invalid("append_rows column count mismatch"));
        }
        self.cols = extra.cols;
        self.rows += extra.rows;
        self.data.extend_from_slice(&extra.data);
        Ok(())
    }

    /// Little-endian IEEE-754 bytes in row-major order.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn from_le_bytes(rows: usize, cols: usize, bytes: &[u8]) -> Result<Matrix> {
        if bytes.len() != rows * cols * 8 {
            return Err(Error::invalid(format!(
                "expected {} bytes for a {rows}x{cols} matrix, found {}",
                rows * cols * 8,
                bytes.len()
            )));
        }
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8"))).collect();
        Matrix::new(rows, cols, data)
    }

    /// Lowercase hex SHA-256 of [`Matrix::to_le_bytes`].
    pub fn digest(&self) -> String {
        sha256_hex(&self.to_le_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let hash = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in hash.iter() {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    libm::sqrt(dot(v, v))
}

/// Probability vector: non-negative entries summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    /// Validates an externally supplied distribution (sum within 1e-9).
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::invalid("probability vector is empty"));
        }
        if entries.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::invalid("probability entries must be finite and non-negative"));
        }
        let sum: f64 = entries.iter().sum();
        if libm::fabs(sum - 1.0) > PROB_SUM_TOLERANCE {
            return Err(Error::invalid(format!("probabilities sum to {sum}, not 1")));
        }
        Ok(ProbVector(entries))
    }

    pub fn one_hot(len: usize, index: usize) -> Result<Self> {
        if index >= len {
            return Err(Error::invalid(format!("one-hot index {index} out of range {len}")));
        }
        let mut v = vec![0.0; len];
        v[index] = 1.0;
        Ok(ProbVector(v))
    }

    /// Index of the largest entry; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for ProbVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for ProbVector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        ProbVector::new(v)
    }
}

impl From<ProbVector> for Vec<f64> {
    fn from(p: ProbVector) -> Self {
        p.0
    }
}

/// Lowest index of the maximum entry.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Max-subtracted softmax.
pub fn softmax(v: &[f64]) -> Result<ProbVector> {
    if v.is_empty() {
        return Err(Error::invalid("softmax of an empty vector"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("softmax input must be finite"));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| libm::exp(x - max)).collect();
    let sum: f64 = exps.iter().sum();
    Ok(ProbVector(exps.into_iter().map(|e| e / sum).collect()))
}

/// `ln Σ exp(v_i)` computed stably.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + libm::log(v.iter().map(|x| libm::exp(x - max)).sum::<f64>())
}

/// `−ln p[target]`, with `p[target]` clamped to [`PROB_FLOOR`].
pub fn cross_entropy(p: &ProbVector, target: usize) -> Result<f64> {
    let pt = *p.get(target).ok_or_else(|| Error::invalid(format!("target {target} out of range {}", p.len())))?;
    Ok(-libm::log(pt.max(PROB_FLOOR)))
}

/// Cross-entropy of `softmax(logits)` against `target`, plus `softmax(logits) − onehot`.
pub(crate) fn cross_entropy_with_grad(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let lse = log_sum_exp(logits);
    let loss = lse - logits[target];
    let mut grad: Vec<f64> = logits.iter().map(|l| libm::exp(l - lse)).collect();
    grad[target] -= 1.0;
    (loss, grad)
}

/// Central finite differences `(f(x + h e_ij) − f(x − h e_ij)) / 2h` for every entry.
pub fn finite_diff_grad<F>(mut f: F, x: &Matrix, h: f64) -> Result<Matrix>
where
    F: FnMut(&Matrix) -> f64,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let mut probe = x.clone();
    let mut grad = Matrix::zeros(x.rows, x.cols);
    for i in 0..x.rows {
        for j in 0..x.cols {
            let orig = x.get(i, j);
            probe.set(i, j, orig + h);
            let plus = f(&probe);
            probe.set(i, j, orig - h);
            let minus = f(&probe);
            probe.set(i, j, orig);
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::OracleFailure { row: i, col: j });
            }
            grad.set(i, j, (plus - minus) / (2.0 * h));
        }
    }
    Ok(grad)
}

/// `max |a − b| / max(|a|, |b|, 1e-8)` over entries.
pub fn relative_error(analytic: &Matrix, numeric: &Matrix) -> Result<f64> {
    if analytic.shape() != numeric.shape() {
        return Err(Error::invalid("relative_error shape mismatch"));
    }
    Ok(analytic
        .data
        .iter()
        .zip(&numeric.data)
        .map(|(a, n)| libm::fabs(a - n) / libm::fabs(*a).max(libm::fabs(*n)).max(1e-8))
        .fold(0.0, f64::max))
}

/// `param − lr · grad`.
pub fn sgd_step(param: &Matrix, grad: &Matrix, lr: f64) -> Result<Matrix> {
    let mut out = param.clone();
    sgd_update(&mut out, grad, lr)?;
    Ok(out)
}

pub(crate) fn sgd_update(param: &mut Matrix, grad: &Matrix, lr: f64) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(Error::invalid(format!("sgd shape mismatch {:?} vs {:?}", param.shape(), grad.shape())));
    }
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::invalid("learning rate must be positive"));
    }
    for (p, g) in param.data.iter_mut().zip(&grad.data) {
        *p -= lr * g;
    }
    if !param.all_finite() {
        return Err(Error::TrainingFailure("parameter diverged to a non-finite value".into()));
    }
    Ok(())
}
