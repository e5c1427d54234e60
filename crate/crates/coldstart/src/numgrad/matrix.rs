//! Row-major dense matrix storage for all vector/matrix quantities in the crate.
//!
//! Everything is `f64`. A batch of feature vectors is a `batch x dim` matrix;
//! a single vector is a `1 x dim` matrix. Shape mismatches are reported through
//! [`Error::ShapeMismatch`] with the offending dimensions spelled out.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Builds a matrix from a flat row-major buffer, validating length and finiteness.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                detail: format!(
                    "data length {} does not equal rows {} x cols {}",
                    data.len(),
                    rows,
                    cols
                ),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "from_vec" });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::ShapeMismatch {
                    op: "from_rows",
                    detail: format!("row {} has {} cols, expected {}", i, r.len(), cols),
                });
            }
        }
        Self::from_vec(rows.len(), cols, rows.concat())
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

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

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

    pub fn same_shape(&self, other: &Self) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    fn shape_err(op: &'static str, detail: String) -> Error {
        Error::ShapeMismatch { op, detail }
    }

    /// `self (r x k) * other (k x c)`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Self::shape_err(
                "matmul",
                format!(
                    "lhs is {}x{}, rhs is {}x{} (inner dims {} != {})",
                    self.rows, self.cols, other.rows, other.cols, self.cols, other.rows
                ),
            ));
        }
        let (r, k, c) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let a_row = &self.data[i * k..(i + 1) * k];
            let out_row = &mut out[i * c..(i + 1) * c];
            for (p, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[p * c..(p + 1) * c];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Self {
            rows: r,
            cols: c,
            data: out,
        })
    }

    /// `self^T (k x r) * other (r x c)`; used for weight gradients `x^T dy`.
    pub fn matmul_at_b(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows {
            return Err(Self::shape_err(
                "matmul_at_b",
                format!(
                    "lhs is {}x{}, rhs is {}x{} (row counts {} != {})",
                    self.rows, self.cols, other.rows, other.cols, self.rows, other.rows
                ),
            ));
        }
        let (r, k, c) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; k * c];
        for b in 0..r {
            let a_row = &self.data[b * k..(b + 1) * k];
            let b_row = &other.data[b * c..(b + 1) * c];
            for (i, &a) in a_row.iter().enumerate() {
                let out_row = &mut out[i * c..(i + 1) * c];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += a * bv;
                }
            }
        }
        Ok(Self {
            rows: k,
            cols: c,
            data: out,
        })
    }

    /// `self (r x k) * other^T (k x c)`; used for input gradients `dy W^T`.
    pub fn matmul_a_bt(&self, other: &Self) -> Result<Self> {
        if self.cols != other.cols {
            return Err(Self::shape_err(
                "matmul_a_bt",
                format!(
                    "lhs is {}x{}, rhs is {}x{} (col counts {} != {})",
                    self.rows, self.cols, other.rows, other.cols, self.cols, other.cols
                ),
            ));
        }
        let (r, k, c) = (self.rows, self.cols, other.rows);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let a_row = &self.data[i * k..(i + 1) * k];
            let out_row = &mut out[i * c..(i + 1) * c];
            for (j, o) in out_row.iter_mut().enumerate() {
                let b_row = &other.data[j * k..(j + 1) * k];
                *o = a_row.iter().zip(b_row).map(|(&a, &b)| a * b).sum();
            }
        }
        Ok(Self {
            rows: r,
            cols: c,
            data: out,
        })
    }

    /// Elementwise product.
    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        if !self.same_shape(other) {
            return Err(Self::shape_err(
                "hadamard",
                format!(
                    "{}x{} vs {}x{}",
                    self.rows, self.cols, other.rows, other.cols
                ),
            ));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a * b)
            .collect();
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if !self.same_shape(other) {
            return Err(Self::shape_err(
                "add",
                format!(
                    "{}x{} vs {}x{}",
                    self.rows, self.cols, other.rows, other.cols
                ),
            ));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    /// `self += scale * other`.
    pub fn add_assign_scaled(&mut self, other: &Self, scale: f64) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Self::shape_err(
                "add_assign_scaled",
                format!(
                    "{}x{} vs {}x{}",
                    self.rows, self.cols, other.rows, other.cols
                ),
            ));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| v * s).collect(),
        }
    }

    /// Column-wise concatenation of two batches with equal row counts.
    pub fn hcat(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows {
            return Err(Self::shape_err(
                "hcat",
                format!("row counts {} != {}", self.rows, other.rows),
            ));
        }
        let cols = self.cols + other.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for r in 0..self.rows {
            data.extend_from_slice(self.row(r));
            data.extend_from_slice(other.row(r));
        }
        Ok(Self {
            rows: self.rows,
            cols,
            data,
        })
    }

    /// Splits columns at `at`, returning the left `at` columns and the rest.
    pub fn split_cols(&self, at: usize) -> Result<(Self, Self)> {
        if at > self.cols {
            return Err(Self::shape_err(
                "split_cols",
                format!("split point {} exceeds {} cols", at, self.cols),
            ));
        }
        let mut left = Vec::with_capacity(self.rows * at);
        let mut right = Vec::with_capacity(self.rows * (self.cols - at));
        for r in 0..self.rows {
            let row = self.row(r);
            left.extend_from_slice(&row[..at]);
            right.extend_from_slice(&row[at..]);
        }
        Ok((
            Self {
                rows: self.rows,
                cols: at,
                data: left,
            },
            Self {
                rows: self.rows,
                cols: self.cols - at,
                data: right,
            },
        ))
    }

    /// Extracts the half-open column range `[start, end)`.
    pub fn col_range(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.cols {
            return Err(Self::shape_err(
                "col_range",
                format!("range {}..{} out of {} cols", start, end, self.cols),
            ));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(self.rows * w);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..end]);
        }
        Ok(Self {
            rows: self.rows,
            cols: w,
            data,
        })
    }

    /// Adds `src` into the column block starting at `start`.
    pub fn add_into_cols(&mut self, start: usize, src: &Self) -> Result<()> {
        if src.rows != self.rows || start + src.cols > self.cols {
            return Err(Self::shape_err(
                "add_into_cols",
                format!(
                    "src {}x{} at col {} does not fit {}x{}",
                    src.rows, src.cols, start, self.rows, self.cols
                ),
            ));
        }
        for r in 0..self.rows {
            let dst = &mut self.data[r * self.cols + start..r * self.cols + start + src.cols];
            for (d, &s) in dst.iter_mut().zip(src.row(r)) {
                *d += s;
            }
        }
        Ok(())
    }

    /// New matrix holding the given rows, in order.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            if i >= self.rows {
                return Err(Self::shape_err(
                    "gather_rows",
                    format!("row index {} out of {} rows", i, self.rows),
                ));
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        })
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (o, &v) in out.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        out
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}
