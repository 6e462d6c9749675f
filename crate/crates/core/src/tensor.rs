//! Dense storage for activations, gradients and dense weights.
//!
//! Matrices carry a layout tag so a transpose can be taken as a zero-cost
//! view; 4-D tensors carry one of the two activation layouts used by the
//! convolution kernels (batch-first `BICMN` and batch-last `ICMNB`).

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MatrixLayout {
    /// Element `(i, j)` of an `R×C` matrix lives at `i·C + j`.
    Standard,
    /// Element `(i, j)` of an `R×C` matrix lives at `j·R + i`.
    TransposedView,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
    layout: MatrixLayout,
}

impl<T: Scalar> DenseMatrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols], layout: MatrixLayout::Standard }
    }

    /// Wraps a row-major buffer.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::LengthMismatch { expected: rows * cols, found: data.len() });
        }
        Ok(Self { rows, cols, data, layout: MatrixLayout::Standard })
    }

    pub fn from_rows(rows: &[&[T]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(shape_err("ragged rows"));
        }
        Self::from_vec(r, c, rows.iter().flat_map(|row| row.iter().copied()).collect())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data, layout: MatrixLayout::Standard }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { T::one() } else { T::zero() })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn layout(&self) -> MatrixLayout {
        self.layout
    }

    /// Raw storage in physical order (see [`MatrixLayout`]).
    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    fn offset(&self, i: usize, j: usize) -> usize {
        match self.layout {
            MatrixLayout::Standard => i * self.cols + j,
            MatrixLayout::TransposedView => j * self.rows + i,
        }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[self.offset(i, j)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        debug_assert!(i < self.rows && j < self.cols);
        let o = self.offset(i, j);
        self.data[o] = v;
    }

    /// Row `i` as a contiguous slice; only valid for standard layout.
    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        debug_assert_eq!(self.layout, MatrixLayout::Standard);
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        debug_assert_eq!(self.layout, MatrixLayout::Standard);
        let c = self.cols;
        &mut self.data[i * c..(i + 1) * c]
    }

    /// Zero-cost transpose: relabels dimensions and flips the layout tag.
    pub fn transpose_view(self) -> Self {
        let layout = match self.layout {
            MatrixLayout::Standard => MatrixLayout::TransposedView,
            MatrixLayout::TransposedView => MatrixLayout::Standard,
        };
        Self { rows: self.cols, cols: self.rows, data: self.data, layout }
    }

    /// Materializes the matrix in standard layout.
    pub fn to_standard(&self) -> Self {
        match self.layout {
            MatrixLayout::Standard => self.clone(),
            MatrixLayout::TransposedView => Self::from_fn(self.rows, self.cols, |i, j| self.get(i, j)),
        }
    }

    pub(crate) fn require_standard(&self, what: &str) -> Result<()> {
        if self.layout != MatrixLayout::Standard {
            return Err(Error::LayoutMismatch(format!("{what} must be in standard layout")));
        }
        Ok(())
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U) -> DenseMatrix<U> {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
            layout: self.layout,
        }
    }
}

/// Materialized transpose, streaming over the rows of the source.
pub fn transpose2d<T: Scalar>(m: &DenseMatrix<T>) -> DenseMatrix<T> {
    let (r, c) = (m.rows, m.cols);
    let mut out = vec![T::zero(); r * c];
    match m.layout {
        MatrixLayout::Standard => {
            for i in 0..r {
                let src = &m.data[i * c..(i + 1) * c];
                for (j, &v) in src.iter().enumerate() {
                    out[j * r + i] = v;
                }
            }
        }
        // The physical buffer already holds the transpose in row-major order.
        MatrixLayout::TransposedView => out.copy_from_slice(&m.data),
    }
    DenseMatrix { rows: c, cols: r, data: out, layout: MatrixLayout::Standard }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Layout4 {
    /// Batch, channel, row, column.
    Bicmn,
    /// Channel, row, column, batch.
    Icmnb,
}

/// Dense 4-D tensor. `dims` are listed in physical (storage) order.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor4<T> {
    dims: [usize; 4],
    data: Vec<T>,
    layout: Layout4,
}

impl<T: Scalar> DenseTensor4<T> {
    pub fn zeros(dims: [usize; 4], layout: Layout4) -> Self {
        Self { dims, data: vec![T::zero(); dims.iter().product()], layout }
    }

    pub fn from_vec(dims: [usize; 4], layout: Layout4, data: Vec<T>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if data.len() != n {
            return Err(Error::LengthMismatch { expected: n, found: data.len() });
        }
        Ok(Self { dims, data, layout })
    }

    pub fn from_fn(dims: [usize; 4], layout: Layout4, mut f: impl FnMut([usize; 4]) -> T) -> Self {
        let mut data = Vec::with_capacity(dims.iter().product());
        for a in 0..dims[0] {
            for b in 0..dims[1] {
                for c in 0..dims[2] {
                    for d in 0..dims[3] {
                        data.push(f([a, b, c, d]));
                    }
                }
            }
        }
        Self { dims, data, layout }
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn layout(&self) -> Layout4 {
        self.layout
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Offset of a physical-order index.
    #[inline]
    pub fn offset(&self, idx: [usize; 4]) -> usize {
        let [_, d1, d2, d3] = self.dims;
        ((idx[0] * d1 + idx[1]) * d2 + idx[2]) * d3 + idx[3]
    }

    #[inline]
    pub fn get(&self, idx: [usize; 4]) -> T {
        self.data[self.offset(idx)]
    }

    #[inline]
    pub fn set(&mut self, idx: [usize; 4], v: T) {
        let o = self.offset(idx);
        self.data[o] = v;
    }

    /// Logical `(b, c, m, n)` dimensions regardless of layout.
    pub fn logical_dims(&self) -> [usize; 4] {
        match self.layout {
            Layout4::Bicmn => self.dims,
            Layout4::Icmnb => [self.dims[3], self.dims[0], self.dims[1], self.dims[2]],
        }
    }

    /// Element at logical index `(b, c, m, n)`.
    #[inline]
    pub fn at(&self, b: usize, c: usize, m: usize, n: usize) -> T {
        match self.layout {
            Layout4::Bicmn => self.get([b, c, m, n]),
            Layout4::Icmnb => self.get([c, m, n, b]),
        }
    }

    pub(crate) fn require_layout(&self, layout: Layout4, what: &str) -> Result<()> {
        if self.layout != layout {
            return Err(Error::LayoutMismatch(format!(
                "{what} expected {layout:?}, found {:?}",
                self.layout
            )));
        }
        Ok(())
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U) -> DenseTensor4<U> {
        DenseTensor4 { dims: self.dims, data: self.data.iter().map(|&v| f(v)).collect(), layout: self.layout }
    }
}

/// Moves the batch index between the first and the last position.
pub fn permute4d<T: Scalar>(t: &DenseTensor4<T>, target: Layout4) -> Result<DenseTensor4<T>> {
    if t.layout == target {
        return Err(Error::LayoutMismatch(format!("tensor is already {target:?}")));
    }
    let [d0, d1, d2, d3] = t.dims;
    let mut out = vec![T::zero(); t.data.len()];
    let dims = match target {
        Layout4::Icmnb => {
            // (b, rest) -> (rest, b)
            let inner = d1 * d2 * d3;
            for b in 0..d0 {
                let src = &t.data[b * inner..(b + 1) * inner];
                for (r, &v) in src.iter().enumerate() {
                    out[r * d0 + b] = v;
                }
            }
            [d1, d2, d3, d0]
        }
        Layout4::Bicmn => {
            let inner = d0 * d1 * d2;
            for r in 0..inner {
                let src = &t.data[r * d3..(r + 1) * d3];
                for (b, &v) in src.iter().enumerate() {
                    out[b * inner + r] = v;
                }
            }
            [d3, d0, d1, d2]
        }
    };
    Ok(DenseTensor4 { dims, data: out, layout: target })
}
