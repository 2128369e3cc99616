use std::fmt;

use crate::error::{GuardianError, Result};

/// Dense row-major matrix of `f64`.
#[derive(Clone, PartialEq)]
pub struct Tensor2D {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl fmt::Debug for Tensor2D {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor2D({}x{}) [", self.rows, self.cols)?;
        for r in 0..self.rows {
            if r > 0 {
                write!(f, "; ")?;
            }
            write!(f, "{:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Tensor2D {
    /// Builds a tensor from row-major values, rejecting length mismatches and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(GuardianError::Shape {
                op: "new",
                left: (rows, cols),
                right: (values.len(), 1),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(GuardianError::NonFinite("tensor construction".into()));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            values: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.values[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a tensor from a slice of equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(GuardianError::Shape {
                op: "from_rows",
                left: (rows.len(), cols),
                right: (1, bad.len()),
            });
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            rows: 1,
            cols: 1,
            values: vec![value],
        }
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

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.values[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }

    /// Value of a 1x1 tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.values.len(), 1);
        self.values[0]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn matmul(&self, other: &Tensor2D) -> Result<Tensor2D> {
        if self.cols != other.rows {
            return Err(GuardianError::Shape {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Tensor2D::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.values[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Tensor2D {
        let mut out = Tensor2D::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.values[c * self.rows + r] = self.values[r * self.cols + c];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor2D {
        Tensor2D {
            rows: self.rows,
            cols: self.cols,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_with(&self, other: &Tensor2D, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor2D> {
        if self.shape() != other.shape() {
            return Err(GuardianError::Shape {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(Tensor2D {
            rows: self.rows,
            cols: self.cols,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor2D) -> Result<Tensor2D> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor2D) -> Result<Tensor2D> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Tensor2D) -> Result<Tensor2D> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor2D {
        self.map(|v| v * c)
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor2D) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn row_norm(&self, r: usize) -> f64 {
        self.row(r).iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Largest absolute elementwise difference; `inf` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Tensor2D) -> f64 {
        if self.shape() != other.shape() {
            return f64::INFINITY;
        }
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Copies the given rows into a new tensor, emitting a zero row for `None`.
    pub fn gather_rows(&self, indices: &[Option<usize>]) -> Tensor2D {
        let mut out = Tensor2D::zeros(indices.len(), self.cols);
        for (dst, src) in indices.iter().enumerate() {
            if let Some(src) = src {
                out.values[dst * self.cols..(dst + 1) * self.cols].copy_from_slice(self.row(*src));
            }
        }
        out
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Tensor2D {
        let mut out = Tensor2D::zeros(self.rows, len);
        for r in 0..self.rows {
            out.values[r * len..(r + 1) * len].copy_from_slice(&self.row(r)[start..start + len]);
        }
        out
    }
}

/// Elementwise activation functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

/// Inputs to the sigmoid are clamped to this magnitude so that outputs stay
/// strictly inside (0, 1).
pub const SIGMOID_CLAMP: f64 = 30.0;

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    let x = x.clamp(-SIGMOID_CLAMP, SIGMOID_CLAMP);
    1.0 / (1.0 + (-x).exp())
}

pub fn activation(kind: Activation, m: &Tensor2D) -> Tensor2D {
    match kind {
        Activation::Relu => m.map(|v| v.max(0.0)),
        Activation::Sigmoid => m.map(sigmoid_scalar),
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(m: &Tensor2D) -> Tensor2D {
    softmax_rows_masked(m, None)
}

/// Row-wise softmax where columns with `mask[c] == false` receive exactly zero
/// weight. Every row must have at least one unmasked column.
pub(crate) fn softmax_rows_masked(m: &Tensor2D, mask: Option<&[bool]>) -> Tensor2D {
    let keep = |c: usize| mask.is_none_or(|mk| mk[c]);
    let mut out = Tensor2D::zeros(m.rows(), m.cols());
    for r in 0..m.rows() {
        let row = m.row(r);
        let max = (0..m.cols())
            .filter(|&c| keep(c))
            .map(|c| row[c])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for c in 0..m.cols() {
            if keep(c) {
                let e = (row[c] - max).exp();
                out.set(r, c, e);
                total += e;
            }
        }
        for c in 0..m.cols() {
            out.set(r, c, out.get(r, c) / total);
        }
    }
    out
}
