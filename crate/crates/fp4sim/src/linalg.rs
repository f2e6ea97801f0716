//! Dense and sparse matrix kernels with a deterministic reduction contract.
//!
//! Every kernel sums along the inner dimension in ascending index order for
//! each output element, so results are bitwise reproducible across runs and
//! thread counts. Parallelism only ever splits work across output rows.

use rayon::prelude::*;

use crate::{Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Minimum row count before `gemm` splits across threads. Small products are
/// cheaper sequentially than through the thread pool.
const PAR_ROW_THRESHOLD: usize = 64;

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimMismatch(format!(
                "data length {} != {}x{}",
                data.len(),
                rows,
                cols
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

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> DenseMatrix {
        DenseMatrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// Index of the first non-finite entry, if any.
    pub fn find_non_finite(&self) -> Option<(usize, usize)> {
        self.data
            .iter()
            .position(|v| !v.is_finite())
            .map(|p| (p / self.cols, p % self.cols))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Pointwise unary map.
    pub fn map(&self, f: impl Fn(f64) -> f64 + Sync) -> DenseMatrix {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Pointwise binary combination; shapes must match.
    pub fn zip_with(&self, other: &DenseMatrix, f: impl Fn(f64, f64) -> f64) -> Result<DenseMatrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::DimMismatch(format!(
                "{}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Element-wise (Hadamard) product.
    pub fn hadamard(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn add(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> DenseMatrix {
        self.map(|v| v * c)
    }
}

/// Full-precision matrix product with a fixed summation order.
///
/// Each output element accumulates `a[i][k] * b[k][j]` for ascending `k`, so
/// the result is identical to a naive triple loop regardless of how rows are
/// distributed across threads.
pub fn gemm(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols != b.rows {
        return Err(Error::DimMismatch(format!(
            "gemm: {}x{} * {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0f64; m * n];

    let row_product = |i: usize, out_row: &mut [f64]| {
        let a_row = &a.data[i * k..(i + 1) * k];
        for (kk, &aik) in a_row.iter().enumerate() {
            let b_row = &b.data[kk * n..(kk + 1) * n];
            for (o, &bkj) in out_row.iter_mut().zip(b_row.iter()) {
                *o += aik * bkj;
            }
        }
    };

    if m >= PAR_ROW_THRESHOLD {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, out_row)| row_product(i, out_row));
    } else {
        for (i, out_row) in out.chunks_mut(n).enumerate() {
            row_product(i, out_row);
        }
    }

    DenseMatrix::new(m, n, out)
}

/// Coordinate-list sparse matrix holding the clamped-off outlier residual.
///
/// Entries are strictly sorted by (row, col) with no duplicates and no
/// explicit zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseResidual {
    rows: usize,
    cols: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl SparseResidual {
    /// Build from entries; they are sorted and validated.
    pub fn new(rows: usize, cols: usize, mut entries: Vec<(usize, usize, f64)>) -> Result<Self> {
        entries.sort_by_key(|&(r, c, _)| (r, c));
        for w in entries.windows(2) {
            if w[0].0 == w[1].0 && w[0].1 == w[1].1 {
                return Err(Error::InvalidConfig(format!(
                    "duplicate sparse entry at ({}, {})",
                    w[0].0, w[0].1
                )));
            }
        }
        for &(r, c, v) in &entries {
            if r >= rows || c >= cols {
                return Err(Error::DimMismatch(format!(
                    "sparse entry ({}, {}) outside {}x{}",
                    r, c, rows, cols
                )));
            }
            if v == 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "explicit zero at ({}, {})",
                    r, c
                )));
            }
        }
        Ok(Self {
            rows,
            cols,
            entries,
        })
    }

    pub fn empty(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            entries: Vec::new(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn entries(&self) -> &[(usize, usize, f64)] {
        &self.entries
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Fraction of stored positions over the full matrix size.
    pub fn sparsity_fraction(&self) -> f64 {
        if self.rows * self.cols == 0 {
            0.0
        } else {
            self.entries.len() as f64 / (self.rows * self.cols) as f64
        }
    }

    pub fn densify(&self) -> DenseMatrix {
        let mut d = DenseMatrix::zeros(self.rows, self.cols);
        for &(r, c, v) in &self.entries {
            d.set(r, c, v);
        }
        d
    }
}

/// `s * b` where `s` is sparse and `b` dense; equals `gemm(densify(s), b)`.
///
/// Entries are visited in sorted order, so per-output-element accumulation
/// follows ascending column index of `s`, matching the dense kernel's
/// ascending-k contract.
pub fn sparse_dense_gemm(s: &SparseResidual, b: &DenseMatrix) -> Result<DenseMatrix> {
    if s.cols != b.rows {
        return Err(Error::DimMismatch(format!(
            "sparse_dense_gemm: {}x{} * {}x{}",
            s.rows, s.cols, b.rows, b.cols
        )));
    }
    let n = b.cols;
    let mut out = DenseMatrix::zeros(s.rows, n);
    for &(r, c, v) in &s.entries {
        let b_row = b.row(c);
        let out_row = &mut out.data[r * n..(r + 1) * n];
        for (o, &bj) in out_row.iter_mut().zip(b_row.iter()) {
            *o += v * bj;
        }
    }
    Ok(out)
}
