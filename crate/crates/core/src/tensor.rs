//! Dense row-major f64 tensors.
//!
//! Shapes are scalar (rank 0) or matrix (rank 2); vectors are stored as
//! single-column or single-row matrices. Tensors are immutable values once
//! built and safe to share across threads.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {:?} needs {} values, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], data: vec![v] }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { shape: vec![rows, cols], data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Tensor { shape: vec![rows, cols], data: vec![v; rows * cols] }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Column vector [n, 1] from a slice.
    pub fn column(values: &[f64]) -> Self {
        Tensor { shape: vec![values.len(), 1], data: values.to_vec() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    pub fn rows(&self) -> usize {
        assert!(self.is_matrix(), "rows() on non-matrix shape {:?}", self.shape);
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert!(self.is_matrix(), "cols() on non-matrix shape {:?}", self.shape);
        self.shape[1]
    }

    pub fn scalar_value(&self) -> f64 {
        assert!(self.numel() == 1, "scalar_value() on shape {:?}", self.shape);
        self.data[0]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let cols = self.cols();
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    // ── arithmetic ───────────────────────────────────────────────────

    pub fn matmul(&self, other: &Tensor) -> Tensor {
        assert!(self.is_matrix() && other.is_matrix(), "matmul on non-matrix");
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (other.rows(), other.cols());
        assert_eq!(k, k2, "matmul inner dims {} vs {}", k, k2);
        let mut out = Tensor::zeros(m, n);
        for i in 0..m {
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let row = &other.data[p * n..(p + 1) * n];
                let dst = &mut out.data[i * n..(i + 1) * n];
                for j in 0..n {
                    dst[j] += a * row[j];
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> Tensor {
        let (m, n) = (self.rows(), self.cols());
        let mut out = Tensor::zeros(n, m);
        for i in 0..m {
            for j in 0..n {
                out.data[j * m + i] = self.data[i * n + j];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape, other.shape, "zip shape mismatch");
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.zip(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        self.zip(other, |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn add_scaled(&self, other: &Tensor, c: f64) -> Tensor {
        self.zip(other, |a, b| a + c * b)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Row-wise softmax with max subtraction.
    pub fn row_softmax(&self) -> Tensor {
        let (m, n) = (self.rows(), self.cols());
        let mut out = self.clone();
        for i in 0..m {
            let row = &mut out.data[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        out
    }

    /// Row-wise L2 normalization, dividing by max(norm, 1e-12).
    pub fn row_l2_normalize(&self) -> Tensor {
        let (m, n) = (self.rows(), self.cols());
        let mut out = self.clone();
        for i in 0..m {
            let row = &mut out.data[i * n..(i + 1) * n];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_GUARD);
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
        out
    }

    pub fn row_sum(&self) -> Tensor {
        let (m, n) = (self.rows(), self.cols());
        let mut out = Tensor::zeros(m, 1);
        for i in 0..m {
            out.data[i] = self.data[i * n..(i + 1) * n].iter().sum();
        }
        out
    }

    pub fn col_sum(&self) -> Tensor {
        let (m, n) = (self.rows(), self.cols());
        let mut out = Tensor::zeros(1, n);
        for i in 0..m {
            for j in 0..n {
                out.data[j] += self.data[i * n + j];
            }
        }
        out
    }

    pub fn gather_rows(&self, indices: &[usize]) -> Tensor {
        let n = self.cols();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Tensor { shape: vec![indices.len(), n], data }
    }

    pub fn gather_cols(&self, indices: &[usize]) -> Tensor {
        let (m, n) = (self.rows(), self.cols());
        let mut data = Vec::with_capacity(m * indices.len());
        for i in 0..m {
            for &j in indices {
                data.push(self.data[i * n + j]);
            }
        }
        Tensor { shape: vec![m, indices.len()], data }
    }

    pub fn concat_rows(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.cols(), other.cols(), "concat_rows col mismatch");
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Tensor { shape: vec![self.rows() + other.rows(), self.cols()], data }
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Tensor {
        let n = self.cols();
        Tensor {
            shape: vec![len, n],
            data: self.data[start * n..(start + len) * n].to_vec(),
        }
    }

    /// Diagonal matrix from a column vector.
    pub fn diag_embed(&self) -> Tensor {
        assert!(self.is_matrix() && self.cols() == 1, "diag_embed needs [m,1]");
        let m = self.rows();
        let mut out = Tensor::zeros(m, m);
        for i in 0..m {
            out.data[i * m + i] = self.data[i];
        }
        out
    }
}

/// Guard for row normalization: divide by max(norm, NORM_GUARD).
pub const NORM_GUARD: f64 = 1e-12;

/// Numerically stable log(1 + e^x).
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
