//! Dense baseline kernels in the same activation layouts as the sparse ones,
//! backed by a blocked GEMM. These are the competitors the dispatcher and
//! the benchmark time the sparse kernels against.

use crate::error::{shape_err, Error, Result};
use crate::geometry::ConvGeometry;
use crate::kernel::{partition, split_lengths, KernelCtx};
use crate::scalar::{gemm, Scalar, StridedRef};
use crate::tensor::{DenseMatrix, DenseTensor4, Layout4};

/// `Oᵀ = Wᵀ·Xᵀ` for `Xᵀ: M×B` and dense `W: M×N`.
pub fn dense_linear_forward_t<T: Scalar>(
    xt: &DenseMatrix<T>,
    w: &DenseMatrix<T>,
    ctx: &KernelCtx,
) -> Result<DenseMatrix<T>> {
    xt.require_standard("Xᵀ")?;
    w.require_standard("W")?;
    if xt.rows() != w.rows() {
        return Err(shape_err(format!("Xᵀ has {} rows, W has {}", xt.rows(), w.rows())));
    }
    let (m, n, b) = (w.rows(), w.cols(), xt.cols());
    let mut ot = DenseMatrix::zeros(n, b);
    gemm(
        n,
        m,
        b,
        T::one(),
        StridedRef::transposed(w.data(), n),
        StridedRef::row_major(xt.data(), b),
        T::zero(),
        ot.data_mut(),
    );
    ctx.count((m * n * b) as u64);
    Ok(ot)
}

/// Returns `(dXᵀ, dW)` with `dXᵀ = W·dOᵀ` and `dW = Xᵀ·dO`.
pub fn dense_linear_backward_t<T: Scalar>(
    xt: &DenseMatrix<T>,
    w: &DenseMatrix<T>,
    dot: &DenseMatrix<T>,
    ctx: &KernelCtx,
) -> Result<(DenseMatrix<T>, DenseMatrix<T>)> {
    xt.require_standard("Xᵀ")?;
    w.require_standard("W")?;
    dot.require_standard("dOᵀ")?;
    let (m, n, b) = (w.rows(), w.cols(), xt.cols());
    if xt.rows() != m || dot.rows() != n || dot.cols() != b {
        return Err(shape_err("Xᵀ, W and dOᵀ disagree"));
    }
    let mut dxt = DenseMatrix::zeros(m, b);
    gemm(m, n, b, T::one(), StridedRef::row_major(w.data(), n), StridedRef::row_major(dot.data(), b), T::zero(), dxt.data_mut());
    let mut dw = DenseMatrix::zeros(m, n);
    gemm(m, b, n, T::one(), StridedRef::row_major(xt.data(), b), StridedRef::transposed(dot.data(), b), T::zero(), dw.data_mut());
    ctx.count((2 * m * n * b) as u64);
    Ok((dxt, dw))
}

fn check_conv<T: Scalar>(x: &DenseTensor4<T>, w: &DenseTensor4<T>, geo: &ConvGeometry) -> Result<()> {
    geo.validate()?;
    x.require_layout(Layout4::Bicmn, "input")?;
    if x.dims() != geo.input_dims() {
        return Err(shape_err(format!("input {:?} vs geometry {:?}", x.dims(), geo.input_dims())));
    }
    if w.layout() != Layout4::Bicmn || w.dims() != geo.weight_dims() {
        return Err(Error::Geometry(format!("weights {:?} vs geometry {:?}", w.dims(), geo.weight_dims())));
    }
    Ok(())
}

/// Unfolds one image `(IC, M, N)` into `(IC·K·K) × (OM·ON)` columns.
fn im2col<T: Scalar>(x: &[T], geo: &ConvGeometry, col: &mut [T]) {
    let (m, n, k, pad, om, on) = (geo.m, geo.n, geo.k, geo.pad, geo.om(), geo.on());
    for ic in 0..geo.ic {
        for i in 0..k {
            for j in 0..k {
                let row = &mut col[((ic * k + i) * k + j) * om * on..][..om * on];
                row.fill(T::zero());
                let ((ps, pe), (qs, qe)) = geo.out_window(i, j);
                for p in ps..pe {
                    let src = &x[(ic * m + p + i - pad) * n..][qs + j - pad..qe + j - pad];
                    row[p * on + qs..p * on + qe].copy_from_slice(src);
                }
            }
        }
    }
}

/// Inverse of [`im2col`], accumulating overlapping windows into `dx`.
fn col2im<T: Scalar>(col: &[T], geo: &ConvGeometry, dx: &mut [T]) {
    let (m, n, k, pad, om, on) = (geo.m, geo.n, geo.k, geo.pad, geo.om(), geo.on());
    for ic in 0..geo.ic {
        for i in 0..k {
            for j in 0..k {
                let row = &col[((ic * k + i) * k + j) * om * on..][..om * on];
                let ((ps, pe), (qs, qe)) = geo.out_window(i, j);
                for p in ps..pe {
                    let dst = &mut dx[(ic * m + p + i - pad) * n..][qs + j - pad..qe + j - pad];
                    for (d, &v) in dst.iter_mut().zip(&row[p * on + qs..p * on + qe]) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// Dense convolution via im2col + GEMM on `Bicmn` activations; threads split
/// the batch.
pub fn dense_conv_forward_im2col<T: Scalar>(
    x: &DenseTensor4<T>,
    w: &DenseTensor4<T>,
    geo: &ConvGeometry,
    ctx: &KernelCtx,
) -> Result<DenseTensor4<T>> {
    check_conv(x, w, geo)?;
    let (rows, cols) = (geo.ic * geo.k * geo.k, geo.om() * geo.on());
    let per_in = geo.ic * geo.m * geo.n;
    let per_out = geo.oc * cols;
    let mut out = DenseTensor4::zeros(geo.output_dims(), Layout4::Bicmn);
    let chunks = partition(geo.b, ctx.threads(), 1);
    let pieces = split_lengths(out.data_mut(), chunks.iter().map(|r| r.len() * per_out));
    let run = |range: std::ops::Range<usize>, piece: &mut [T]| {
        let mut col = vec![T::zero(); rows * cols];
        for (bi, o) in range.zip(piece.chunks_exact_mut(per_out.max(1))) {
            im2col(&x.data()[bi * per_in..(bi + 1) * per_in], geo, &mut col);
            gemm(geo.oc, rows, cols, T::one(), StridedRef::row_major(w.data(), rows), StridedRef::row_major(&col, cols), T::zero(), o);
        }
    };
    std::thread::scope(|s| {
        for (r, p) in chunks.into_iter().zip(pieces) {
            s.spawn(move || run(r, p));
        }
    });
    ctx.count((geo.b * geo.oc * rows * cols) as u64);
    Ok(out)
}

/// Returns `(dX, dW)` for the im2col convolution.
pub fn dense_conv_backward_im2col<T: Scalar>(
    x: &DenseTensor4<T>,
    w: &DenseTensor4<T>,
    d_out: &DenseTensor4<T>,
    geo: &ConvGeometry,
    ctx: &KernelCtx,
) -> Result<(DenseTensor4<T>, DenseTensor4<T>)> {
    check_conv(x, w, geo)?;
    d_out.require_layout(Layout4::Bicmn, "output gradient")?;
    if d_out.dims() != geo.output_dims() {
        return Err(shape_err(format!("dO {:?} vs geometry {:?}", d_out.dims(), geo.output_dims())));
    }
    let (rows, cols) = (geo.ic * geo.k * geo.k, geo.om() * geo.on());
    let per_in = geo.ic * geo.m * geo.n;
    let per_out = geo.oc * cols;
    let mut dx = DenseTensor4::zeros(geo.input_dims(), Layout4::Bicmn);
    let chunks = partition(geo.b, ctx.threads(), 1);
    let pieces = split_lengths(dx.data_mut(), chunks.iter().map(|r| r.len() * per_in));
    let run = |range: std::ops::Range<usize>, piece: &mut [T]| {
        let mut col = vec![T::zero(); rows * cols];
        let mut dcol = vec![T::zero(); rows * cols];
        let mut dw = vec![T::zero(); geo.oc * rows];
        for (bi, dxb) in range.zip(piece.chunks_exact_mut(per_in.max(1))) {
            let dob = &d_out.data()[bi * per_out..(bi + 1) * per_out];
            im2col(&x.data()[bi * per_in..(bi + 1) * per_in], geo, &mut col);
            gemm(geo.oc, cols, rows, T::one(), StridedRef::row_major(dob, cols), StridedRef::transposed(&col, cols), T::one(), &mut dw);
            gemm(rows, geo.oc, cols, T::one(), StridedRef::transposed(w.data(), rows), StridedRef::row_major(dob, cols), T::zero(), &mut dcol);
            col2im(&dcol, geo, dxb);
        }
        dw
    };
    let partials: Vec<Vec<T>> = std::thread::scope(|s| {
        let handles: Vec<_> = chunks.into_iter().zip(pieces).map(|(r, p)| s.spawn(move || run(r, p))).collect();
        handles.into_iter().map(|h| h.join().expect("kernel thread panicked")).collect()
    });
    let mut dw = DenseTensor4::zeros(geo.weight_dims(), Layout4::Bicmn);
    for partial in &partials {
        for (d, &v) in dw.data_mut().iter_mut().zip(partial) {
            *d += v;
        }
    }
    ctx.count((2 * geo.b * geo.oc * rows * cols) as u64);
    Ok((dx, dw))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lanes::LaneSpec;
    use crate::reference::{dense_conv_backward, dense_conv_forward, dense_linear_backward, dense_linear_forward};
    use crate::tensor::transpose2d;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: &[f32], b: &[f64]) {
        assert_eq!(a.len(), b.len());
        for (&x, &y) in a.iter().zip(b) {
            assert!((x as f64 - y).abs() <= 1e-5 + 1e-5 * y.abs(), "{x} vs {y}");
        }
    }

    #[test]
    fn linear_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (b, m, n) = (13, 9, 7);
        let x = DenseMatrix::from_fn(b, m, |_, _| rng.random_range(-1.0f32..1.0));
        let w = DenseMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0f32..1.0));
        let g = DenseMatrix::from_fn(b, n, |_, _| rng.random_range(-1.0f32..1.0));
        let (x64, w64, g64) = (x.map(f64::from), w.map(f64::from), g.map(f64::from));
        let ctx = KernelCtx::default();
        let ot = dense_linear_forward_t(&transpose2d(&x), &w, &ctx).unwrap();
        close(transpose2d(&ot).data(), dense_linear_forward(&x64, &w64).unwrap().data());
        let (dxt, dw) = dense_linear_backward_t(&transpose2d(&x), &w, &transpose2d(&g), &ctx).unwrap();
        let (dx_ref, dw_ref) = dense_linear_backward(&x64, &w64, &g64).unwrap();
        close(transpose2d(&dxt).data(), dx_ref.data());
        close(dw.data(), dw_ref.data());
    }

    #[test]
    fn conv_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (b, ic, oc, m, n, k, pad, threads) in [(3, 2, 4, 6, 5, 3, 1, 1), (4, 3, 2, 5, 5, 5, 2, 3), (2, 1, 1, 4, 4, 1, 0, 2)] {
            let geo = ConvGeometry::new(b, ic, oc, m, n, k, pad).unwrap();
            let rnd = |d: [usize; 4], rng: &mut ChaCha8Rng| DenseTensor4::from_fn(d, Layout4::Bicmn, |_| rng.random_range(-1.0f32..1.0));
            let x = rnd(geo.input_dims(), &mut rng);
            let w = rnd(geo.weight_dims(), &mut rng);
            let g = rnd(geo.output_dims(), &mut rng);
            let ctx = KernelCtx::new(LaneSpec::default(), threads).unwrap();
            let (x64, w64, g64) = (x.map(f64::from), w.map(f64::from), g.map(f64::from));
            let o = dense_conv_forward_im2col(&x, &w, &geo, &ctx).unwrap();
            close(o.data(), dense_conv_forward(&x64, &w64, &geo).unwrap().data());
            let (dx, dw) = dense_conv_backward_im2col(&x, &w, &g, &geo, &ctx).unwrap();
            let (dx_ref, dw_ref) = dense_conv_backward(&x64, &w64, &g64, &geo).unwrap();
            close(dx.data(), dx_ref.data());
            close(dw.data(), dw_ref.data());
        }
    }
}
