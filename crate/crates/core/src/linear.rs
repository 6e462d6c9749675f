//! Sparse fully-connected kernels over batch-last (transposed) activations.
//!
//! Activations are `features × batch`, so every weight touches one
//! contiguous batch span of the input and one of the output. The backward
//! pass walks the nonzeros once; per nonzero it updates a span of `dXᵀ` and
//! accumulates the sampled `dW` dot product in the same loop.
//!
//! Threads own disjoint batch chunks. Partial `dW` values are summed in
//! ascending thread order, so results depend on the thread count only through
//! that final reduction.

use std::ops::Range;

use crate::error::{shape_err, Result};
use crate::format::CsrMatrix;
use crate::kernel::{partition, KernelCtx};
use crate::lanes::{fmadd_into, with_lane_width, LaneAcc};
use crate::scalar::Scalar;
use crate::tensor::DenseMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrads<T> {
    /// `(dO·Wᵀ)ᵀ`, `M×B`.
    pub dxt: DenseMatrix<T>,
    /// Gradient of each stored weight, in CSR order.
    pub dw_vals: Vec<T>,
}

/// `Oᵀ = (X·W)ᵀ` from `Xᵀ: M×B` and a CSR `W: M×N`.
pub fn sparse_linear_forward<T: Scalar>(
    xt: &DenseMatrix<T>,
    w: &CsrMatrix<T>,
    ctx: &KernelCtx,
) -> Result<DenseMatrix<T>> {
    xt.require_standard("Xᵀ")?;
    if xt.rows() != w.n_rows() {
        return Err(shape_err(format!("Xᵀ has {} rows, W has {}", xt.rows(), w.n_rows())));
    }
    let (n, b) = (w.n_cols(), xt.cols());
    let mut ot = DenseMatrix::zeros(n, b);
    let chunks = partition(b, ctx.threads(), ctx.lane().width());
    with_lane_width!(ctx.lane(), W => {
        if chunks.len() <= 1 {
            forward_chunk::<T, W>(xt.data(), w, b, 0..b, ot.data_mut(), b);
        } else {
            let locals = std::thread::scope(|s| {
                let handles: Vec<_> = chunks
                    .iter()
                    .map(|r| {
                        let r = r.clone();
                        s.spawn(move || {
                            let mut local = vec![T::zero(); n * r.len()];
                            forward_chunk::<T, W>(xt.data(), w, b, r.clone(), &mut local, r.len());
                            local
                        })
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("kernel thread panicked")).collect::<Vec<_>>()
            });
            scatter_columns(ot.data_mut(), b, &chunks, &locals);
        }
    });
    ctx.count((w.nnz() * b) as u64);
    Ok(ot)
}

fn forward_chunk<T: Scalar, const W: usize>(
    xt: &[T],
    w: &CsrMatrix<T>,
    b: usize,
    cols: Range<usize>,
    out: &mut [T],
    out_stride: usize,
) {
    let len = cols.len();
    let (col_idx, vals) = (w.col_idx(), w.vals());
    for r in 0..w.n_rows() {
        let x = &xt[r * b + cols.start..r * b + cols.end];
        for j in w.row_range(r) {
            let c = col_idx[j] as usize;
            fmadd_into::<T, W>(&mut out[c * out_stride..c * out_stride + len], x, vals[j]);
        }
    }
}

/// Fused backward pass: `dXᵀ` via the sparse product and `dW` at the stored
/// positions via sampled dot products, in one sweep over the nonzeros.
pub fn sparse_linear_backward<T: Scalar>(
    xt: &DenseMatrix<T>,
    w: &CsrMatrix<T>,
    dot: &DenseMatrix<T>,
    ctx: &KernelCtx,
) -> Result<LinearGrads<T>> {
    xt.require_standard("Xᵀ")?;
    dot.require_standard("dOᵀ")?;
    let (m, n, b) = (w.n_rows(), w.n_cols(), xt.cols());
    if xt.rows() != m || dot.rows() != n || dot.cols() != b {
        return Err(shape_err(format!(
            "Xᵀ {}x{}, W {}x{}, dOᵀ {}x{}",
            xt.rows(),
            xt.cols(),
            m,
            n,
            dot.rows(),
            dot.cols()
        )));
    }
    let mut dxt = DenseMatrix::zeros(m, b);
    let mut dw_vals = vec![T::zero(); w.nnz()];
    let chunks = partition(b, ctx.threads(), ctx.lane().width());
    with_lane_width!(ctx.lane(), W => {
        if chunks.len() <= 1 {
            backward_chunk::<T, W>(xt.data(), dot.data(), w, b, 0..b, dxt.data_mut(), b, &mut dw_vals);
        } else {
            let locals = std::thread::scope(|s| {
                let handles: Vec<_> = chunks
                    .iter()
                    .map(|r| {
                        let r = r.clone();
                        s.spawn(move || {
                            let mut dx = vec![T::zero(); m * r.len()];
                            let mut dw = vec![T::zero(); w.nnz()];
                            backward_chunk::<T, W>(xt.data(), dot.data(), w, b, r.clone(), &mut dx, r.len(), &mut dw);
                            (dx, dw)
                        })
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("kernel thread panicked")).collect::<Vec<_>>()
            });
            let (dx_parts, dw_parts): (Vec<_>, Vec<_>) = locals.into_iter().unzip();
            scatter_columns(dxt.data_mut(), b, &chunks, &dx_parts);
            for partial in &dw_parts {
                for (acc, &p) in dw_vals.iter_mut().zip(partial) {
                    *acc += p;
                }
            }
        }
    });
    ctx.count((2 * w.nnz() * b) as u64);
    Ok(LinearGrads { dxt, dw_vals })
}

#[allow(clippy::too_many_arguments)]
fn backward_chunk<T: Scalar, const W: usize>(
    xt: &[T],
    dot: &[T],
    w: &CsrMatrix<T>,
    b: usize,
    cols: Range<usize>,
    dx: &mut [T],
    dx_stride: usize,
    dw: &mut [T],
) {
    let len = cols.len();
    let (col_idx, vals) = (w.col_idx(), w.vals());
    for r in 0..w.n_rows() {
        let x = &xt[r * b + cols.start..r * b + cols.end];
        let dx_row = &mut dx[r * dx_stride..r * dx_stride + len];
        for j in w.row_range(r) {
            let c = col_idx[j] as usize;
            let d = &dot[c * b + cols.start..c * b + cols.end];
            let mut acc = LaneAcc::<T, W>::new();
            acc.fused(dx_row, d, x, vals[j]);
            dw[j] = acc.reduce();
        }
    }
}

/// Copies per-chunk `rows × chunk_len` buffers into the column ranges of a
/// row-major `rows × stride` matrix.
fn scatter_columns<T: Scalar>(dst: &mut [T], stride: usize, chunks: &[Range<usize>], parts: &[Vec<T>]) {
    for (range, part) in chunks.iter().zip(parts) {
        let len = range.len();
        for (row, src) in dst.chunks_exact_mut(stride).zip(part.chunks_exact(len)) {
            row[range.clone()].copy_from_slice(src);
        }
    }
}
