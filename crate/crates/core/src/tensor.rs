//! Dense row-major f32 matrices and the kernels the autodiff graph is built on.
//!
//! Everything in training touches these kernels, so `matmul` is written to
//! autovectorize (ikj loop order, contiguous row accumulation) and splits
//! rows across rayon workers above a size threshold. Each output row is owned
//! by exactly one worker and accumulated in a fixed order, so results are
//! bitwise identical regardless of thread count.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

/// 2-D row-major f32 tensor. Vectors are `1 x n` or `n x 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn full(rows: usize, cols: usize, v: f32) -> Self {
        Tensor { rows, cols, data: vec![v; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        assert_eq!(rows * cols, data.len(), "shape/data length mismatch");
        Tensor { rows, cols, data }
    }

    pub fn scalar(v: f32) -> Self {
        Tensor::from_vec(1, 1, vec![v])
    }

    /// Gaussian init, mean 0.
    pub fn randn<R: Rng>(rows: usize, cols: usize, std: f32, rng: &mut R) -> Self {
        let normal = Normal::new(0.0f32, std).expect("valid std");
        let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
        Tensor { rows, cols, data }
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
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// In-place `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f32, other: &Tensor) {
        assert!(self.same_shape(other), "axpy shape mismatch");
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += alpha * b;
        }
    }

    pub fn frob_norm(&self) -> f32 {
        self.data.iter().map(|x| x * x).sum::<f32>().sqrt()
    }
}

/// Row count below which matmul stays single threaded.
const PAR_ROW_THRESHOLD: usize = 24;

#[inline]
fn matmul_row(a_row: &[f32], b: &Tensor, out_row: &mut [f32]) {
    out_row.fill(0.0);
    for (k, &aik) in a_row.iter().enumerate() {
        if aik == 0.0 {
            continue;
        }
        let b_row = b.row(k);
        for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
            *o += aik * bv;
        }
    }
}

/// `a (m x k) * b (k x n) -> (m x n)`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.rows, "matmul inner dims: {} vs {}", a.cols, b.rows);
    let mut out = Tensor::zeros(a.rows, b.cols);
    let n = b.cols;
    if a.rows >= PAR_ROW_THRESHOLD && a.cols * n >= 2048 {
        out.data
            .par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, out_row)| matmul_row(a.row(i), b, out_row));
    } else {
        for i in 0..a.rows {
            matmul_row(a.row(i), b, &mut out.data[i * n..(i + 1) * n]);
        }
    }
    out
}

/// `a (m x k) * b^T (n x k) -> (m x n)`; b is stored untransposed.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.cols, "matmul_nt inner dims: {} vs {}", a.cols, b.cols);
    let mut out = Tensor::zeros(a.rows, b.rows);
    let n = b.rows;
    let dot = |x: &[f32], y: &[f32]| -> f32 {
        let mut s = 0.0f32;
        for (xv, yv) in x.iter().zip(y.iter()) {
            s += xv * yv;
        }
        s
    };
    if a.rows >= PAR_ROW_THRESHOLD && a.cols * n >= 2048 {
        out.data
            .par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, out_row)| {
                let a_row = a.row(i);
                for (j, o) in out_row.iter_mut().enumerate() {
                    *o = dot(a_row, b.row(j));
                }
            });
    } else {
        for i in 0..a.rows {
            let a_row = a.row(i);
            for j in 0..n {
                out.data[i * n + j] = dot(a_row, b.row(j));
            }
        }
    }
    out
}

/// `a^T (k x m) * b (k x n) -> (m x n)`; a is stored untransposed.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.rows, b.rows, "matmul_tn inner dims: {} vs {}", a.rows, b.rows);
    let mut out = Tensor::zeros(a.cols, b.cols);
    // out[i][j] = sum_k a[k][i] * b[k][j]; accumulate row blocks sequentially.
    for k in 0..a.rows {
        let a_row = a.row(k);
        let b_row = b.row(k);
        for (i, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                *o += av * bv;
            }
        }
    }
    out
}
