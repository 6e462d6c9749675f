use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{DenseMatrix, MatrixLayout};

/// Compressed-sparse-row weight matrix.
///
/// Row `i` owns entries `row_ptr[i]..row_ptr[i + 1]` of `col_idx`/`vals`,
/// with strictly increasing column indices inside each row.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix<T> {
    n_rows: usize,
    n_cols: usize,
    row_ptr: Vec<u32>,
    col_idx: Vec<u32>,
    vals: Vec<T>,
}

impl<T: Scalar> CsrMatrix<T> {
    /// Builds from raw arrays, validating every invariant.
    pub fn from_parts(
        n_rows: usize,
        n_cols: usize,
        row_ptr: Vec<u32>,
        col_idx: Vec<u32>,
        vals: Vec<T>,
    ) -> Result<Self> {
        let m = Self { n_rows, n_cols, row_ptr, col_idx, vals };
        m.validate()?;
        Ok(m)
    }

    pub fn empty(n_rows: usize, n_cols: usize) -> Self {
        Self { n_rows, n_cols, row_ptr: vec![0; n_rows + 1], col_idx: Vec::new(), vals: Vec::new() }
    }

    /// Keeps every entry that is not exactly zero.
    pub fn from_dense(m: &DenseMatrix<T>) -> Result<Self> {
        Self::build(m, |i, j| m.get(i, j) != T::zero())
    }

    /// Keeps exactly the positions where `mask` (row-major) is set, including
    /// any that currently hold zero.
    pub fn from_dense_masked(m: &DenseMatrix<T>, mask: &[bool]) -> Result<Self> {
        let expected = m.rows() * m.cols();
        if mask.len() != expected {
            return Err(Error::LengthMismatch { expected, found: mask.len() });
        }
        let cols = m.cols();
        Self::build(m, |i, j| mask[i * cols + j])
    }

    fn build(m: &DenseMatrix<T>, keep: impl Fn(usize, usize) -> bool) -> Result<Self> {
        let (rows, cols) = (m.rows(), m.cols());
        check_u32(cols, "column count")?;
        let mut row_ptr = Vec::with_capacity(rows + 1);
        let mut col_idx = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0u32);
        for i in 0..rows {
            for j in 0..cols {
                if keep(i, j) {
                    col_idx.push(j as u32);
                    vals.push(m.get(i, j));
                }
            }
            row_ptr.push(check_u32(vals.len(), "nnz")?);
        }
        Ok(Self { n_rows: rows, n_cols: cols, row_ptr, col_idx, vals })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvariantViolation(msg));
        if self.row_ptr.len() != self.n_rows + 1 {
            return bad(format!("row_ptr has {} entries, expected {}", self.row_ptr.len(), self.n_rows + 1));
        }
        if self.col_idx.len() != self.vals.len() {
            return bad(format!("{} column indices but {} values", self.col_idx.len(), self.vals.len()));
        }
        if self.row_ptr[0] != 0 {
            return bad("row_ptr[0] must be 0".into());
        }
        if self.row_ptr[self.n_rows] as usize != self.vals.len() {
            return bad(format!("row_ptr[M] = {} but nnz = {}", self.row_ptr[self.n_rows], self.vals.len()));
        }
        for i in 0..self.n_rows {
            let (s, e) = (self.row_ptr[i] as usize, self.row_ptr[i + 1] as usize);
            if s > e {
                return bad(format!("row_ptr decreases at row {i}"));
            }
            let cols = &self.col_idx[s..e];
            if let Some(&c) = cols.iter().find(|&&c| c as usize >= self.n_cols) {
                return bad(format!("column {c} out of range in row {i}"));
            }
            if cols.windows(2).any(|p| p[0] >= p[1]) {
                return bad(format!("columns not strictly increasing in row {i}"));
            }
        }
        Ok(())
    }

    pub fn to_dense(&self) -> Result<DenseMatrix<T>> {
        self.validate()?;
        Ok(self.densify_values(&self.vals))
    }

    /// Dense materialization of `vals` laid out on this matrix's support.
    pub(crate) fn densify_values(&self, vals: &[T]) -> DenseMatrix<T> {
        let mut out = DenseMatrix::zeros(self.n_rows, self.n_cols);
        for i in 0..self.n_rows {
            for k in self.row_range(i) {
                out.set(i, self.col_idx[k] as usize, vals[k]);
            }
        }
        out
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row_ptr(&self) -> &[u32] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[u32] {
        &self.col_idx
    }

    pub fn vals(&self) -> &[T] {
        &self.vals
    }

    pub fn vals_mut(&mut self) -> &mut [T] {
        &mut self.vals
    }

    #[inline]
    pub fn row_range(&self, i: usize) -> std::ops::Range<usize> {
        self.row_ptr[i] as usize..self.row_ptr[i + 1] as usize
    }

    /// Row-major support mask.
    pub fn mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.n_rows * self.n_cols];
        for i in 0..self.n_rows {
            for k in self.row_range(i) {
                mask[i * self.n_cols + self.col_idx[k] as usize] = true;
            }
        }
        mask
    }

    /// The same arrays read column-wise: a CSC handle for the `N×M` transpose.
    pub fn csc_view(&self) -> CscView<'_, T> {
        CscView { inner: self }
    }
}

fn check_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::IndexWidthOverflow(format!("{what} {v} exceeds u32")))
}

/// Zero-copy CSC interpretation of a [`CsrMatrix`]: column `j` of the view
/// holds row `j` of the underlying matrix.
#[derive(Debug, Clone, Copy)]
pub struct CscView<'a, T> {
    inner: &'a CsrMatrix<T>,
}

impl<'a, T: Scalar> CscView<'a, T> {
    pub fn n_rows(&self) -> usize {
        self.inner.n_cols
    }

    pub fn n_cols(&self) -> usize {
        self.inner.n_rows
    }

    /// Column pointer array (the CSR row pointers).
    pub fn col_ptr(&self) -> &'a [u32] {
        &self.inner.row_ptr
    }

    /// Row indices of stored entries (the CSR column indices).
    pub fn row_idx(&self) -> &'a [u32] {
        &self.inner.col_idx
    }

    pub fn vals(&self) -> &'a [T] {
        &self.inner.vals
    }

    pub fn source(&self) -> &'a CsrMatrix<T> {
        self.inner
    }

    /// Dense materialization of the transpose.
    pub fn to_dense(&self) -> Result<DenseMatrix<T>> {
        // Densifying the CSR gives W (M×N) in standard layout; the same
        // buffer read as a transposed view is Wᵀ.
        let d = self.inner.to_dense()?;
        debug_assert_eq!(d.layout(), MatrixLayout::Standard);
        Ok(d.transpose_view().to_standard())
    }
}
