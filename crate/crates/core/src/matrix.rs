//! Dense row-major `f64` matrices.
//!
//! Everything in the crate (base weights, adapter factors, noise draws,
//! server optimizer state) is a [`Matrix`]. Matrices are plain values: no
//! operation mutates its inputs, so they can be shared read-only across
//! worker threads.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major entries. Every entry must be finite.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid("shape", format!("{rows}x{cols} has a zero dimension")));
        }
        if data.len() != rows * cols {
            return Err(Error::invalid(
                "data",
                format!("{} entries for a {rows}x{cols} matrix", data.len()),
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("entry {pos} is {}", data[pos])));
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
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
    }

    /// Builds a matrix from nested rows; all rows must have the same length.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        if rows.iter().any(|r| r.as_ref().len() != cols) {
            return Err(Error::invalid("rows", "ragged row lengths"));
        }
        let data = rows.iter().flat_map(|r| r.as_ref().iter().copied()).collect();
        Self::new(rows.len(), cols, data)
    }

    /// A column vector.
    pub fn column(values: &[f64]) -> Result<Self> {
        Self::new(values.len(), 1, values.to_vec())
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
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
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

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn frobenius_norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// `sqrt(sum of squared entries)`.
    pub fn frobenius_norm(&self) -> f64 {
        self.frobenius_norm_sq().sqrt()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape(),
                right: rhs.shape(),
            });
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        matmul_into(self, rhs, &mut out);
        Ok(out)
    }

    /// `self^T · rhs` without materialising the transpose.
    pub fn t_matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.rows != rhs.rows {
            return Err(Error::ShapeMismatch {
                op: "t_matmul",
                left: self.shape(),
                right: rhs.shape(),
            });
        }
        let mut out = Matrix::zeros(self.cols, rhs.cols);
        for k in 0..self.rows {
            let lrow = self.row(k);
            let rrow = rhs.row(k);
            for (i, &l) in lrow.iter().enumerate() {
                if l == 0.0 {
                    continue;
                }
                let orow = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (o, &r) in orow.iter_mut().zip(rrow) {
                    *o += l * r;
                }
            }
        }
        Ok(out)
    }

    /// `self · rhs^T` without materialising the transpose.
    pub fn matmul_t(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.cols {
            return Err(Error::ShapeMismatch {
                op: "matmul_t",
                left: self.shape(),
                right: rhs.shape(),
            });
        }
        Ok(Matrix::from_fn(self.rows, rhs.rows, |i, j| {
            dot(self.row(i), rhs.row(j))
        }))
    }

    pub fn add(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with(rhs, "sub", |a, b| a - b)
    }

    pub fn add_assign(&mut self, rhs: &Matrix) -> Result<()> {
        self.check_same(rhs, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += b;
        }
        Ok(())
    }

    /// `self += c * rhs`.
    pub fn axpy(&mut self, c: f64, rhs: &Matrix) -> Result<()> {
        self.check_same(rhs, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += c * b;
        }
        Ok(())
    }

    pub fn scale(&self, c: f64) -> Matrix {
        self.map(|v| v * c)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_with(
        &self,
        rhs: &Matrix,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Matrix> {
        self.check_same(rhs, op)?;
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    /// Inner product of the flattened entries.
    pub fn dot(&self, rhs: &Matrix) -> Result<f64> {
        self.check_same(rhs, "dot")?;
        Ok(dot(&self.data, &rhs.data))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Columns `start..start + width`.
    pub fn slice_cols(&self, start: usize, width: usize) -> Result<Matrix> {
        if width == 0 || start + width > self.cols {
            return Err(Error::invalid(
                "column range",
                format!("{start}..{} of {} columns", start + width, self.cols),
            ));
        }
        Ok(Matrix::from_fn(self.rows, width, |i, j| self.get(i, start + j)))
    }

    /// Rows `start..start + height`.
    pub fn slice_rows(&self, start: usize, height: usize) -> Result<Matrix> {
        if height == 0 || start + height > self.rows {
            return Err(Error::invalid(
                "row range",
                format!("{start}..{} of {} rows", start + height, self.rows),
            ));
        }
        Ok(Matrix {
            rows: height,
            cols: self.cols,
            data: self.data[start * self.cols..(start + height) * self.cols].to_vec(),
        })
    }

    fn check_same(&self, rhs: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != rhs.shape() {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape(),
                right: rhs.shape(),
            });
        }
        Ok(())
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        write!(f, "]")
    }
}

/// Solves `lhs · X = rhs` for square `lhs` by Gaussian elimination with
/// partial pivoting.
pub fn solve(lhs: &Matrix, rhs: &Matrix) -> Result<Matrix> {
    let n = lhs.rows;
    if lhs.cols != n || rhs.rows != n {
        return Err(Error::ShapeMismatch {
            op: "solve",
            left: lhs.shape(),
            right: rhs.shape(),
        });
    }
    let k = rhs.cols;
    let mut a = lhs.clone();
    let mut b = rhs.clone();
    let scale = a.data.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a.get(i, col).abs().total_cmp(&a.get(j, col).abs()))
            .expect("non-empty range");
        if a.get(pivot, col).abs() <= scale * 1e-14 {
            return Err(Error::invalid("solve", "matrix is numerically singular"));
        }
        if pivot != col {
            for j in 0..n {
                a.data.swap(pivot * n + j, col * n + j);
            }
            for j in 0..k {
                b.data.swap(pivot * k + j, col * k + j);
            }
        }
        let p = a.get(col, col);
        for i in col + 1..n {
            let f = a.get(i, col) / p;
            if f == 0.0 {
                continue;
            }
            for j in col..n {
                let v = a.get(i, j) - f * a.get(col, j);
                a.set(i, j, v);
            }
            for j in 0..k {
                let v = b.get(i, j) - f * b.get(col, j);
                b.set(i, j, v);
            }
        }
    }
    let mut x = Matrix::zeros(n, k);
    for i in (0..n).rev() {
        for j in 0..k {
            let mut v = b.get(i, j);
            for t in i + 1..n {
                v -= a.get(i, t) * x.get(t, j);
            }
            x.set(i, j, v / a.get(i, i));
        }
    }
    Ok(x)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `out = lhs · rhs`; `out` must already be zeroed and correctly shaped.
pub(crate) fn matmul_into(lhs: &Matrix, rhs: &Matrix, out: &mut Matrix) {
    let n = rhs.cols;
    for i in 0..lhs.rows {
        let orow = &mut out.data[i * n..(i + 1) * n];
        for (k, &l) in lhs.row(i).iter().enumerate() {
            if l == 0.0 {
                continue;
            }
            for (o, &r) in orow.iter_mut().zip(rhs.row(k)) {
                *o += l * r;
            }
        }
    }
}

/// Column-concatenates `parts` in order (`[P1 | P2 | ...]`).
pub fn stack_h(parts: &[Matrix]) -> Result<Matrix> {
    let first = parts.first().ok_or(Error::Empty("stack_h"))?;
    let rows = first.rows;
    for p in parts {
        if p.rows != rows {
            return Err(Error::ShapeMismatch {
                op: "stack_h",
                left: first.shape(),
                right: p.shape(),
            });
        }
    }
    let cols: usize = parts.iter().map(|p| p.cols).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for p in parts {
            data.extend_from_slice(p.row(i));
        }
    }
    Ok(Matrix { rows, cols, data })
}

/// Row-concatenates `parts` in order, each one below the previous.
pub fn stack_v(parts: &[Matrix]) -> Result<Matrix> {
    let first = parts.first().ok_or(Error::Empty("stack_v"))?;
    let cols = first.cols;
    for p in parts {
        if p.cols != cols {
            return Err(Error::ShapeMismatch {
                op: "stack_v",
                left: first.shape(),
                right: p.shape(),
            });
        }
    }
    let rows: usize = parts.iter().map(|p| p.rows).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for p in parts {
        data.extend_from_slice(&p.data);
    }
    Ok(Matrix { rows, cols, data })
}
