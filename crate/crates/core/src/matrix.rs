//! Dense row-major `f64` matrices plus the one piece of linear algebra the
//! crate needs beyond products: LU factorization with partial pivoting.
//!
//! Everything is 64-bit; the numeric self-checks downstream need residuals
//! well below 1e-8, which `f32` cannot provide.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Elementwise operation selector shared by [`DenseMatrix::elementwise`] and
/// the tape op of the same name.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElemKind {
    Add,
    Sub,
    Hadamard,
}

/// Dense row-major matrix of 64-bit reals.
///
/// Vectors are represented as 1-row or 1-column matrices. The only implicit
/// broadcast anywhere in the crate is a 1-row right operand repeated over the
/// left operand's rows (bias terms); every other shape mismatch is an error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![1.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_flat(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Contract(format!(
                "from_flat: {} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != c {
                return Err(Error::Contract(format!(
                    "from_rows: row {i} has {} entries, expected {c}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Ok(DenseMatrix { rows: r, cols: c, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.set(i, j, f(i, j));
            }
        }
        m
    }

    /// 1x1 matrix holding a single scalar.
    pub fn scalar(v: f64) -> Self {
        DenseMatrix {
            rows: 1,
            cols: 1,
            data: vec![v],
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

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn matmul(&self, rhs: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != rhs.rows {
            return Err(Error::dims("matmul", self.shape(), rhs.shape()));
        }
        let mut out = DenseMatrix::zeros(self.rows, rhs.cols);
        // i-k-j order keeps the inner loop contiguous in both operands.
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                let out_row = i * rhs.cols;
                let rhs_row = k * rhs.cols;
                for j in 0..rhs.cols {
                    out.data[out_row + j] += a * rhs.data[rhs_row + j];
                }
            }
        }
        Ok(out)
    }

    /// Elementwise add/sub/Hadamard. A 1-row `rhs` with matching column count
    /// is broadcast over `self`'s rows; any other mismatch is an error.
    pub fn elementwise(&self, rhs: &DenseMatrix, kind: ElemKind) -> Result<DenseMatrix> {
        let broadcast = rhs.rows == 1 && self.rows > 1 && rhs.cols == self.cols;
        if !broadcast && self.shape() != rhs.shape() {
            let op = match kind {
                ElemKind::Add => "add",
                ElemKind::Sub => "sub",
                ElemKind::Hadamard => "hadamard",
            };
            return Err(Error::dims(op, self.shape(), rhs.shape()));
        }
        let mut out = self.clone();
        for i in 0..self.rows {
            let r = if broadcast { 0 } else { i };
            for j in 0..self.cols {
                let b = rhs.get(r, j);
                let v = &mut out.data[i * self.cols + j];
                match kind {
                    ElemKind::Add => *v += b,
                    ElemKind::Sub => *v -= b,
                    ElemKind::Hadamard => *v *= b,
                }
            }
        }
        Ok(out)
    }

    pub fn add(&self, rhs: &DenseMatrix) -> Result<DenseMatrix> {
        self.elementwise(rhs, ElemKind::Add)
    }

    pub fn sub(&self, rhs: &DenseMatrix) -> Result<DenseMatrix> {
        self.elementwise(rhs, ElemKind::Sub)
    }

    pub fn hadamard(&self, rhs: &DenseMatrix) -> Result<DenseMatrix> {
        self.elementwise(rhs, ElemKind::Hadamard)
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(j, i, self.get(i, j));
            }
        }
        out
    }

    pub fn scale(&self, k: f64) -> DenseMatrix {
        self.map(|v| v * k)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> DenseMatrix {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn frob_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Euclidean distance between rows `i` and `j`.
    pub fn row_distance(&self, i: usize, j: usize) -> f64 {
        self.row(i)
            .iter()
            .zip(self.row(j))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// Same data viewed with a different shape (entry count must match).
    pub fn reshaped(&self, rows: usize, cols: usize) -> Result<DenseMatrix> {
        if rows * cols != self.data.len() {
            return Err(Error::Contract(format!(
                "reshape: {}x{} matrix cannot become {rows}x{cols}",
                self.rows, self.cols
            )));
        }
        Ok(DenseMatrix {
            rows,
            cols,
            data: self.data.clone(),
        })
    }

    /// Index of the largest entry in row `r`; ties resolve to the lowest index.
    pub fn argmax_row(&self, r: usize) -> usize {
        let row = self.row(r);
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        best
    }
}

/// Solve `A X = B` for square `A` by LU factorization with partial pivoting.
///
/// Returns [`Error::Singular`] with the offending pivot index when no usable
/// pivot exists in a column.
pub fn lu_solve(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::dims("lu_solve", a.shape(), a.shape()));
    }
    if b.rows() != n {
        return Err(Error::dims("lu_solve", a.shape(), b.shape()));
    }

    let mut lu = a.clone();
    let mut x = b.clone();
    let tiny = 1e-13 * (1.0 + a.max_abs());

    for k in 0..n {
        let mut piv = k;
        for i in (k + 1)..n {
            if lu.get(i, k).abs() > lu.get(piv, k).abs() {
                piv = i;
            }
        }
        if lu.get(piv, k).abs() < tiny {
            return Err(Error::Singular { pivot: k });
        }
        if piv != k {
            for j in 0..n {
                let t = lu.get(k, j);
                lu.set(k, j, lu.get(piv, j));
                lu.set(piv, j, t);
            }
            for j in 0..x.cols() {
                let t = x.get(k, j);
                x.set(k, j, x.get(piv, j));
                x.set(piv, j, t);
            }
        }
        let d = lu.get(k, k);
        for i in (k + 1)..n {
            let f = lu.get(i, k) / d;
            if f == 0.0 {
                continue;
            }
            lu.set(i, k, f);
            for j in (k + 1)..n {
                let v = lu.get(i, j) - f * lu.get(k, j);
                lu.set(i, j, v);
            }
            // forward-eliminate the right-hand side in the same sweep
            for j in 0..x.cols() {
                let v = x.get(i, j) - f * x.get(k, j);
                x.set(i, j, v);
            }
        }
    }

    // back substitution
    for j in 0..x.cols() {
        for i in (0..n).rev() {
            let mut v = x.get(i, j);
            for k in (i + 1)..n {
                v -= lu.get(i, k) * x.get(k, j);
            }
            x.set(i, j, v / lu.get(i, i));
        }
    }
    Ok(x)
}
