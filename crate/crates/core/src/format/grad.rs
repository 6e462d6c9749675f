use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{DenseMatrix, DenseTensor4};

use super::{CsrMatrix, SparseConvWeights};

/// A sparse weight layout whose stored values can be swapped for a gradient
/// living on the same support.
pub trait SparseLayout {
    type Scalar: Scalar;
    type Dense;

    fn nnz(&self) -> usize;
    fn values(&self) -> &[Self::Scalar];
    fn values_mut(&mut self) -> &mut [Self::Scalar];
    /// Dense materialization of `vals` placed on this layout's support.
    fn densify_with(&self, vals: &[Self::Scalar]) -> Self::Dense;
}

impl<T: Scalar> SparseLayout for CsrMatrix<T> {
    type Scalar = T;
    type Dense = DenseMatrix<T>;

    fn nnz(&self) -> usize {
        CsrMatrix::nnz(self)
    }
    fn values(&self) -> &[T] {
        self.vals()
    }
    fn values_mut(&mut self) -> &mut [T] {
        self.vals_mut()
    }
    fn densify_with(&self, vals: &[T]) -> DenseMatrix<T> {
        self.densify_values(vals)
    }
}

impl<T: Scalar> SparseLayout for SparseConvWeights<T> {
    type Scalar = T;
    type Dense = DenseTensor4<T>;

    fn nnz(&self) -> usize {
        SparseConvWeights::nnz(self)
    }
    fn values(&self) -> &[T] {
        self.vals()
    }
    fn values_mut(&mut self) -> &mut [T] {
        self.vals_mut()
    }
    fn densify_with(&self, vals: &[T]) -> DenseTensor4<T> {
        self.densify_values(vals)
    }
}

/// Gradient restricted to the support of a sparse weight layout. Shares the
/// index arrays of the layout it was scattered onto.
#[derive(Debug, Clone)]
pub struct SparseGrad<'a, W: SparseLayout> {
    layout: &'a W,
    vals: Vec<W::Scalar>,
}

impl<'a, W: SparseLayout> SparseGrad<'a, W> {
    pub fn layout(&self) -> &'a W {
        self.layout
    }

    pub fn vals(&self) -> &[W::Scalar] {
        &self.vals
    }

    pub fn to_dense(&self) -> W::Dense {
        self.layout.densify_with(&self.vals)
    }

    pub fn into_vals(self) -> Vec<W::Scalar> {
        self.vals
    }
}

pub fn scatter_grad_values<W: SparseLayout>(layout: &W, grad_vals: Vec<W::Scalar>) -> Result<SparseGrad<'_, W>> {
    if grad_vals.len() != layout.nnz() {
        return Err(Error::LengthMismatch { expected: layout.nnz(), found: grad_vals.len() });
    }
    Ok(SparseGrad { layout, vals: grad_vals })
}
