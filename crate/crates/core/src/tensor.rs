//! Dense row-major matrices and the numerically stable softmax/selection
//! primitives the rest of the crate is built on.

use std::cmp::Ordering;
use std::ops::Range;

use crate::error::{Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major data. Rejects a length mismatch and
    /// any non-finite entry.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                op: "Matrix::new",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("Matrix::new"));
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

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::ShapeMismatch {
                    op: "Matrix::from_rows",
                    left: (rows.len(), cols),
                    right: (1, r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    /// Unchecked constructor for internal callers that already hold a
    /// consistent buffer.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
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

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
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
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact panics on 0; an empty-width matrix still has `rows` rows.
        (0..self.rows).map(move |r| self.row(r))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Appends one row. The row width must match.
    pub fn push_row(&mut self, row: &[f64]) -> Result<()> {
        if self.rows > 0 && row.len() != self.cols {
            return Err(Error::ShapeMismatch {
                op: "Matrix::push_row",
                left: self.shape(),
                right: (1, row.len()),
            });
        }
        if self.rows == 0 {
            self.cols = row.len();
        }
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    /// Gathers rows in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Matrix> {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            if i >= self.rows {
                return Err(Error::OutOfRange {
                    what: "Matrix::select_rows",
                    index: i,
                    bound: self.rows,
                });
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Matrix::from_raw(indices.len(), self.cols, data))
    }

    /// Copies out a contiguous column band (e.g. one attention head).
    pub fn column_band(&self, cols: Range<usize>) -> Matrix {
        let width = cols.len();
        let mut data = Vec::with_capacity(self.rows * width);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[cols.clone()]);
        }
        Matrix::from_raw(self.rows, width, data)
    }

    /// Writes `band` into the columns starting at `col0`.
    pub fn set_column_band(&mut self, col0: usize, band: &Matrix) {
        debug_assert_eq!(band.rows, self.rows);
        for r in 0..self.rows {
            let dst = &mut self.row_mut(r)[col0..col0 + band.cols];
            dst.copy_from_slice(band.row(r));
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for x in &mut self.data {
            *x *= factor;
        }
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        matmul(self, other)
    }
}

/// Sequential dot product. Every attention score in the crate goes through
/// here so that different call paths agree bit-for-bit.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let arow = a.row(i);
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, &bkj) in orow.iter_mut().zip(brow) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// In-place stable softmax of `logits * scale`. Returns `false` (leaving the
/// slice untouched) if any entry is non-finite.
pub(crate) fn softmax_in_place(v: &mut [f64], scale: f64) -> bool {
    if v.iter().any(|x| !x.is_finite()) {
        return false;
    }
    let max = v.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x * scale));
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x * scale - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
    true
}

/// Row-wise softmax of `m * scale`, computed with max subtraction.
pub fn softmax_rows(m: &Matrix, scale: f64) -> Result<Matrix> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::config(format!("softmax scale must be > 0, got {scale}")));
    }
    let mut out = m.clone();
    let cols = m.cols;
    if cols == 0 {
        return Ok(out);
    }
    for row in out.data.chunks_exact_mut(cols) {
        if !softmax_in_place(row, scale) {
            return Err(Error::NonFinite("softmax_rows"));
        }
    }
    Ok(out)
}

pub fn logsumexp(v: &[f64]) -> f64 {
    let max = v.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    if max == f64::NEG_INFINITY {
        return max;
    }
    let sum: f64 = v.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

pub fn log_softmax_row(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Empty("log_softmax_row"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("log_softmax_row"));
    }
    let lse = logsumexp(v);
    Ok(v.iter().map(|&x| x - lse).collect())
}

fn ranked(v: &[f64], k: usize, largest: bool) -> Result<Vec<usize>> {
    if k > v.len() {
        return Err(Error::OutOfRange {
            what: "top/bottom-k",
            index: k,
            bound: v.len(),
        });
    }
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| {
        let ord = if largest {
            v[b].total_cmp(&v[a])
        } else {
            v[a].total_cmp(&v[b])
        };
        // lower index wins ties
        ord.then(a.cmp(&b))
    });
    idx.truncate(k);
    idx.sort_unstable();
    Ok(idx)
}

/// Indices of the `k` largest values, ascending by index. Ties go to the
/// lower index.
pub fn top_k_indices(v: &[f64], k: usize) -> Result<Vec<usize>> {
    ranked(v, k, true)
}

/// Indices of the `k` smallest values, ascending by index. Ties go to the
/// lower index.
pub fn bottom_k_indices(v: &[f64], k: usize) -> Result<Vec<usize>> {
    ranked(v, k, false)
}

/// Index of the maximum; ties go to the lower index.
pub fn argmax(v: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &x) in v.iter().enumerate() {
        match best {
            None => best = Some(i),
            Some(b) if x.total_cmp(&v[b]) == Ordering::Greater => best = Some(i),
            _ => {}
        }
    }
    best
}
