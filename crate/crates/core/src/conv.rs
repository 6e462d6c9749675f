//! Sparse stride-1 convolution kernels.
//!
//! Two variants share the same per-nonzero structure: for each stored weight
//! `(oc, ic, x, y)` the valid output window `[p_s, p_e) × [q_s, q_e)` is
//! clipped against the padded input, and every row of that window is one
//! contiguous span.
//!
//! * [`ConvVariant::BatchLast`] works on `Icmnb` activations. A window row
//!   covers `(q_e − q_s)·B` contiguous values, so small images still fill
//!   full lane groups. Threads split output channels; each keeps a private
//!   `dX` that is summed in thread order.
//! * [`ConvVariant::OverOn`] works on `Bicmn` activations and vectorizes along
//!   the output row. Threads split the batch.

use crate::error::{shape_err, Error, Result};
use crate::format::SparseConvWeights;
use crate::geometry::ConvGeometry;
use crate::kernel::{partition, split_lengths, KernelCtx};
use crate::lanes::{fmadd_into, with_lane_width, LaneAcc, LaneSpec};
use crate::scalar::Scalar;
use crate::tensor::{DenseTensor4, Layout4};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ConvVariant {
    BatchLast,
    OverOn,
}

impl ConvVariant {
    pub fn layout(self) -> Layout4 {
        match self {
            ConvVariant::BatchLast => Layout4::Icmnb,
            ConvVariant::OverOn => Layout4::Bicmn,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ConvVariant::BatchLast => "batchlast",
            ConvVariant::OverOn => "overON",
        }
    }
}

/// Threshold used when none is configured: two lane groups.
pub fn default_variant_threshold(lane: LaneSpec) -> usize {
    2 * lane.width()
}

/// `BatchLast` when the output width is below `threshold`, else `OverOn`.
pub fn select_conv_variant(geo: &ConvGeometry, threshold: usize) -> ConvVariant {
    if geo.on() < threshold {
        ConvVariant::BatchLast
    } else {
        ConvVariant::OverOn
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads<T> {
    /// Input gradient in the variant's layout.
    pub dx: DenseTensor4<T>,
    /// Gradient of each stored weight, in storage order.
    pub dw_vals: Vec<T>,
}

fn check_inputs<T: Scalar>(
    x: &DenseTensor4<T>,
    w: &SparseConvWeights<T>,
    geo: &ConvGeometry,
    variant: ConvVariant,
) -> Result<()> {
    geo.validate()?;
    x.require_layout(variant.layout(), "input")?;
    if x.logical_dims() != geo.input_dims() {
        return Err(shape_err(format!("input {:?} vs geometry {:?}", x.logical_dims(), geo.input_dims())));
    }
    let wd = [w.out_channels(), w.in_channels(), w.kernel_h(), w.kernel_w()];
    if wd != geo.weight_dims() {
        return Err(Error::Geometry(format!("weights {wd:?} vs geometry {:?}", geo.weight_dims())));
    }
    Ok(())
}

fn output_tensor<T: Scalar>(geo: &ConvGeometry, variant: ConvVariant) -> DenseTensor4<T> {
    let [b, oc, om, on] = geo.output_dims();
    match variant {
        ConvVariant::BatchLast => DenseTensor4::zeros([oc, om, on, b], Layout4::Icmnb),
        ConvVariant::OverOn => DenseTensor4::zeros([b, oc, om, on], Layout4::Bicmn),
    }
}

fn input_tensor<T: Scalar>(geo: &ConvGeometry, variant: ConvVariant) -> DenseTensor4<T> {
    let [b, ic, m, n] = geo.input_dims();
    match variant {
        ConvVariant::BatchLast => DenseTensor4::zeros([ic, m, n, b], Layout4::Icmnb),
        ConvVariant::OverOn => DenseTensor4::zeros([b, ic, m, n], Layout4::Bicmn),
    }
}

/// Sparse forward pass; the output is in the variant's layout.
pub fn sparse_conv_forward<T: Scalar>(
    x: &DenseTensor4<T>,
    w: &SparseConvWeights<T>,
    geo: &ConvGeometry,
    variant: ConvVariant,
    ctx: &KernelCtx,
) -> Result<DenseTensor4<T>> {
    check_inputs(x, w, geo, variant)?;
    let mut out = output_tensor(geo, variant);
    let (outer, per_outer) = match variant {
        ConvVariant::BatchLast => (geo.oc, geo.om() * geo.on() * geo.b),
        ConvVariant::OverOn => (geo.b, geo.oc * geo.om() * geo.on()),
    };
    let chunks = partition(outer, ctx.threads(), 1);
    let pieces = split_lengths(out.data_mut(), chunks.iter().map(|r| r.len() * per_outer));
    let work: u64 = with_lane_width!(ctx.lane(), W => {
        let run = |range: std::ops::Range<usize>, piece: &mut [T]| match variant {
            ConvVariant::BatchLast => forward_batch_last::<T, W>(x.data(), w, geo, range, piece),
            ConvVariant::OverOn => forward_over_on::<T, W>(x.data(), w, geo, range, piece),
        };
        if chunks.len() <= 1 {
            pieces.into_iter().zip(chunks).map(|(p, r)| run(r, p)).sum()
        } else {
            std::thread::scope(|s| {
                let handles: Vec<_> = pieces
                    .into_iter()
                    .zip(chunks)
                    .map(|(p, r)| s.spawn(move || run(r, p)))
                    .collect();
                handles.into_iter().map(|h| h.join().expect("kernel thread panicked")).sum()
            })
        }
    });
    ctx.count(work);
    Ok(out)
}

fn forward_batch_last<T: Scalar, const W: usize>(
    x: &[T],
    w: &SparseConvWeights<T>,
    geo: &ConvGeometry,
    ocs: std::ops::Range<usize>,
    out: &mut [T],
) -> u64 {
    let (b, m, n, om, on, pad) = (geo.b, geo.m, geo.n, geo.om(), geo.on(), geo.pad);
    let (wx, wy, vals) = (w.w_x(), w.w_y(), w.vals());
    let mut work = 0u64;
    for oc in ocs.clone() {
        let obase = (oc - ocs.start) * om * on * b;
        for ic in 0..geo.ic {
            for s in w.segment(oc, ic) {
                let (kx, ky) = (wx[s] as usize, wy[s] as usize);
                let ((ps, pe), (qs, qe)) = geo.out_window(kx, ky);
                let span = (qe - qs) * b;
                for p in ps..pe {
                    let o = obase + (p * on + qs) * b;
                    let xi = ((ic * m + p + kx - pad) * n + qs + ky - pad) * b;
                    fmadd_into::<T, W>(&mut out[o..o + span], &x[xi..xi + span], vals[s]);
                }
                work += ((pe - ps) * span) as u64;
            }
        }
    }
    work
}

fn forward_over_on<T: Scalar, const W: usize>(
    x: &[T],
    w: &SparseConvWeights<T>,
    geo: &ConvGeometry,
    batches: std::ops::Range<usize>,
    out: &mut [T],
) -> u64 {
    let (m, n, om, on, pad) = (geo.m, geo.n, geo.om(), geo.on(), geo.pad);
    let (wx, wy, vals) = (w.w_x(), w.w_y(), w.vals());
    let mut work = 0u64;
    for bi in batches.clone() {
        for oc in 0..geo.oc {
            let obase = ((bi - batches.start) * geo.oc + oc) * om * on;
            for ic in 0..geo.ic {
                let xbase = (bi * geo.ic + ic) * m * n;
                for s in w.segment(oc, ic) {
                    let (kx, ky) = (wx[s] as usize, wy[s] as usize);
                    let ((ps, pe), (qs, qe)) = geo.out_window(kx, ky);
                    let span = qe - qs;
                    for p in ps..pe {
                        let o = obase + p * on + qs;
                        let xi = xbase + (p + kx - pad) * n + qs + ky - pad;
                        fmadd_into::<T, W>(&mut out[o..o + span], &x[xi..xi + span], vals[s]);
                    }
                    work += ((pe - ps) * span) as u64;
                }
            }
        }
    }
    work
}

/// Fused sparse backward pass producing `dX` (variant layout) and the
/// gradient of every stored weight.
pub fn sparse_conv_backward<T: Scalar>(
    x: &DenseTensor4<T>,
    w: &SparseConvWeights<T>,
    d_out: &DenseTensor4<T>,
    geo: &ConvGeometry,
    variant: ConvVariant,
    ctx: &KernelCtx,
) -> Result<ConvGrads<T>> {
    check_inputs(x, w, geo, variant)?;
    d_out.require_layout(variant.layout(), "output gradient")?;
    if d_out.logical_dims() != geo.output_dims() {
        return Err(shape_err(format!("dO {:?} vs geometry {:?}", d_out.logical_dims(), geo.output_dims())));
    }
    let mut dx = input_tensor(geo, variant);
    let mut dw_vals = vec![T::zero(); w.nnz()];
    let work = with_lane_width!(ctx.lane(), W => match variant {
        ConvVariant::BatchLast => backward_batch_last_par::<T, W>(x, w, d_out, geo, ctx, &mut dx, &mut dw_vals),
        ConvVariant::OverOn => backward_over_on_par::<T, W>(x, w, d_out, geo, ctx, &mut dx, &mut dw_vals),
    });
    ctx.count(work);
    Ok(ConvGrads { dx, dw_vals })
}

fn backward_batch_last_par<T: Scalar, const W: usize>(
    x: &DenseTensor4<T>,
    w: &SparseConvWeights<T>,
    d_out: &DenseTensor4<T>,
    geo: &ConvGeometry,
    ctx: &KernelCtx,
    dx: &mut DenseTensor4<T>,
    dw_vals: &mut [T],
) -> u64 {
    let chunks = partition(geo.oc, ctx.threads(), 1);
    let dw_lens = chunks.iter().map(|r| {
        if r.is_empty() { 0 } else { w.w_och()[r.end] as usize - w.w_och()[r.start] as usize }
    });
    let dw_pieces = split_lengths(dw_vals, dw_lens);
    if chunks.len() <= 1 {
        return dw_pieces
            .into_iter()
            .zip(chunks)
            .map(|(dw, r)| backward_batch_last::<T, W>(x.data(), w, d_out.data(), geo, r, dx.data_mut(), dw))
            .sum();
    }
    let len = dx.len();
    let results: Vec<(Vec<T>, u64)> = std::thread::scope(|s| {
        let handles: Vec<_> = dw_pieces
            .into_iter()
            .zip(chunks)
            .map(|(dw, r)| {
                s.spawn(move || {
                    let mut local = vec![T::zero(); len];
                    let work = backward_batch_last::<T, W>(x.data(), w, d_out.data(), geo, r, &mut local, dw);
                    (local, work)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("kernel thread panicked")).collect()
    });
    let dst = dx.data_mut();
    let mut work = 0;
    for (local, wk) in &results {
        for (d, &v) in dst.iter_mut().zip(local) {
            *d += v;
        }
        work += wk;
    }
    work
}

/// Processes output channels `ocs`; `dw` holds exactly their entries.
fn backward_batch_last<T: Scalar, const W: usize>(
    x: &[T],
    w: &SparseConvWeights<T>,
    d_out: &[T],
    geo: &ConvGeometry,
    ocs: std::ops::Range<usize>,
    dx: &mut [T],
    dw: &mut [T],
) -> u64 {
    if ocs.is_empty() {
        return 0;
    }
    let (b, m, n, om, on, pad) = (geo.b, geo.m, geo.n, geo.om(), geo.on(), geo.pad);
    let (wx, wy, vals) = (w.w_x(), w.w_y(), w.vals());
    let first = w.w_och()[ocs.start] as usize;
    let mut work = 0u64;
    for oc in ocs {
        let obase = oc * om * on * b;
        for ic in 0..geo.ic {
            for s in w.segment(oc, ic) {
                let (kx, ky) = (wx[s] as usize, wy[s] as usize);
                let ((ps, pe), (qs, qe)) = geo.out_window(kx, ky);
                let span = (qe - qs) * b;
                let mut acc = LaneAcc::<T, W>::new();
                for p in ps..pe {
                    let o = obase + (p * on + qs) * b;
                    let xi = ((ic * m + p + kx - pad) * n + qs + ky - pad) * b;
                    acc.fused(&mut dx[xi..xi + span], &d_out[o..o + span], &x[xi..xi + span], vals[s]);
                }
                dw[s - first] = acc.reduce();
                work += 2 * ((pe - ps) * span) as u64;
            }
        }
    }
    work
}

fn backward_over_on_par<T: Scalar, const W: usize>(
    x: &DenseTensor4<T>,
    w: &SparseConvWeights<T>,
    d_out: &DenseTensor4<T>,
    geo: &ConvGeometry,
    ctx: &KernelCtx,
    dx: &mut DenseTensor4<T>,
    dw_vals: &mut [T],
) -> u64 {
    let chunks = partition(geo.b, ctx.threads(), 1);
    let per_b = geo.ic * geo.m * geo.n;
    let pieces = split_lengths(dx.data_mut(), chunks.iter().map(|r| r.len() * per_b));
    if chunks.len() <= 1 {
        return pieces
            .into_iter()
            .zip(chunks)
            .map(|(p, r)| backward_over_on::<T, W>(x.data(), w, d_out.data(), geo, r, p, dw_vals))
            .sum();
    }
    let nnz = w.nnz();
    let results: Vec<(Vec<T>, u64)> = std::thread::scope(|s| {
        let handles: Vec<_> = pieces
            .into_iter()
            .zip(chunks)
            .map(|(p, r)| {
                s.spawn(move || {
                    let mut partial = vec![T::zero(); nnz];
                    let work = backward_over_on::<T, W>(x.data(), w, d_out.data(), geo, r, p, &mut partial);
                    (partial, work)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("kernel thread panicked")).collect()
    });
    let mut work = 0;
    for (partial, wk) in &results {
        for (d, &v) in dw_vals.iter_mut().zip(partial) {
            *d += v;
        }
        work += wk;
    }
    work
}

/// Processes batch elements `batches`; `dx` holds exactly their planes and
/// per-nonzero sums are added into `dw`.
fn backward_over_on<T: Scalar, const W: usize>(
    x: &[T],
    w: &SparseConvWeights<T>,
    d_out: &[T],
    geo: &ConvGeometry,
    batches: std::ops::Range<usize>,
    dx: &mut [T],
    dw: &mut [T],
) -> u64 {
    let (m, n, om, on, pad) = (geo.m, geo.n, geo.om(), geo.on(), geo.pad);
    let (wx, wy, vals) = (w.w_x(), w.w_y(), w.vals());
    let mut work = 0u64;
    for bi in batches.clone() {
        for oc in 0..geo.oc {
            let obase = (bi * geo.oc + oc) * om * on;
            for ic in 0..geo.ic {
                let xbase = (bi * geo.ic + ic) * m * n;
                let dxbase = ((bi - batches.start) * geo.ic + ic) * m * n;
                for s in w.segment(oc, ic) {
                    let (kx, ky) = (wx[s] as usize, wy[s] as usize);
                    let ((ps, pe), (qs, qe)) = geo.out_window(kx, ky);
                    let span = qe - qs;
                    let mut acc = LaneAcc::<T, W>::new();
                    for p in ps..pe {
                        let o = obase + p * on + qs;
                        let row = (p + kx - pad) * n + qs + ky - pad;
                        acc.fused(
                            &mut dx[dxbase + row..dxbase + row + span],
                            &d_out[o..o + span],
                            &x[xbase + row..xbase + row + span],
                            vals[s],
                        );
                    }
                    dw[s] += acc.reduce();
                    work += 2 * ((pe - ps) * span) as u64;
                }
            }
        }
    }
    work
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::WorkCounter;
    use crate::reference::{dense_conv_backward, dense_conv_forward};
    use crate::tensor::permute4d;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(dims: [usize; 4], rng: &mut ChaCha8Rng) -> DenseTensor4<f32> {
        DenseTensor4::from_fn(dims, Layout4::Bicmn, |_| rng.random_range(-1.0..1.0))
    }

    fn random_sparse(dims: [usize; 4], sparsity: f64, rng: &mut ChaCha8Rng) -> DenseTensor4<f32> {
        DenseTensor4::from_fn(dims, Layout4::Bicmn, |_| {
            if rng.random_bool(sparsity) { 0.0 } else { rng.random_range(-1.0..1.0) }
        })
    }

    fn to_layout(t: &DenseTensor4<f32>, layout: Layout4) -> DenseTensor4<f32> {
        if t.layout() == layout { t.clone() } else { permute4d(t, layout).unwrap() }
    }

    /// `scale` holds the per-coordinate sum of |terms|, the natural
    /// magnitude for rounding error in an f32 accumulation.
    fn assert_close(got: &DenseTensor4<f32>, want: &DenseTensor4<f64>, scale: &DenseTensor4<f64>) {
        let got = to_layout(got, Layout4::Bicmn);
        assert_eq!(got.dims(), want.dims());
        for ((a, e), s) in got.data().iter().zip(want.data()).zip(scale.data()) {
            assert!((*a as f64 - e).abs() <= 1e-6 + 1e-5 * s, "{a} vs {e}");
        }
    }

    fn check(geo: ConvGeometry, sparsity: f64, seed: u64, ctx: &KernelCtx) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(geo.input_dims(), &mut rng);
        let wd = random_sparse(geo.weight_dims(), sparsity, &mut rng);
        let g = random(geo.output_dims(), &mut rng);
        let w = SparseConvWeights::from_dense(&wd).unwrap();
        let (x64, w64, g64) = (x.map(|v| v as f64), wd.map(|v| v as f64), g.map(|v| v as f64));
        let o_ref = dense_conv_forward(&x64, &w64, &geo).unwrap();
        let (dx_ref, dw_ref) = dense_conv_backward(&x64, &w64, &g64, &geo).unwrap();
        let (xa, wa, ga) = (x64.map(f64::abs), w64.map(f64::abs), g64.map(f64::abs));
        let o_scale = dense_conv_forward(&xa, &wa, &geo).unwrap();
        let (dx_scale, dw_scale) = dense_conv_backward(&xa, &wa, &ga, &geo).unwrap();
        let mask = w.mask();
        let on_mask = |t: &DenseTensor4<f64>| -> Vec<f64> {
            t.data().iter().zip(&mask).filter(|(_, &m)| m).map(|(&v, _)| v).collect()
        };
        let (dw_gathered, dw_scale) = (on_mask(&dw_ref), on_mask(&dw_scale));

        for variant in [ConvVariant::BatchLast, ConvVariant::OverOn] {
            let xl = to_layout(&x, variant.layout());
            let gl = to_layout(&g, variant.layout());
            let o = sparse_conv_forward(&xl, &w, &geo, variant, ctx).unwrap();
            assert_eq!(o.layout(), variant.layout());
            assert_close(&o, &o_ref, &o_scale);
            let grads = sparse_conv_backward(&xl, &w, &gl, &geo, variant, ctx).unwrap();
            assert_close(&grads.dx, &dx_ref, &dx_scale);
            for ((a, e), s) in grads.dw_vals.iter().zip(&dw_gathered).zip(&dw_scale) {
                assert!((*a as f64 - e).abs() <= 1e-6 + 1e-5 * s, "{variant:?} dW {a} vs {e}");
            }
        }
    }

    #[test]
    fn empty_weights_give_zero() {
        let geo = ConvGeometry::new(3, 2, 4, 5, 5, 3, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = SparseConvWeights::from_dense(&DenseTensor4::zeros(geo.weight_dims(), Layout4::Bicmn)).unwrap();
        let x = random(geo.input_dims(), &mut rng);
        for v in [ConvVariant::BatchLast, ConvVariant::OverOn] {
            let o = sparse_conv_forward(&to_layout(&x, v.layout()), &w, &geo, v, &KernelCtx::default()).unwrap();
            assert!(o.data().iter().all(|&z| z == 0.0));
        }
    }

    #[test]
    fn unit_kernel_passthrough() {
        let geo = ConvGeometry::new(5, 2, 3, 4, 6, 1, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut wd = DenseTensor4::zeros(geo.weight_dims(), Layout4::Bicmn);
        wd.set([0, 0, 0, 0], 1.0f32);
        let w = SparseConvWeights::from_dense(&wd).unwrap();
        let x = random(geo.input_dims(), &mut rng);
        let g = random(geo.output_dims(), &mut rng);
        for v in [ConvVariant::BatchLast, ConvVariant::OverOn] {
            let ctx = KernelCtx::default();
            let o = to_layout(&sparse_conv_forward(&to_layout(&x, v.layout()), &w, &geo, v, &ctx).unwrap(), Layout4::Bicmn);
            let grads = sparse_conv_backward(&to_layout(&x, v.layout()), &w, &to_layout(&g, v.layout()), &geo, v, &ctx).unwrap();
            let dx = to_layout(&grads.dx, Layout4::Bicmn);
            let mut expected_dw = 0.0f64;
            for b in 0..5 {
                for p in 0..4 {
                    for q in 0..6 {
                        assert_eq!(o.get([b, 0, p, q]), x.get([b, 0, p, q]));
                        assert_eq!(o.get([b, 1, p, q]), 0.0);
                        assert_eq!(dx.get([b, 0, p, q]), g.get([b, 0, p, q]));
                        assert_eq!(dx.get([b, 1, p, q]), 0.0);
                        expected_dw += g.get([b, 0, p, q]) as f64 * x.get([b, 0, p, q]) as f64;
                    }
                }
            }
            assert!((grads.dw_vals[0] as f64 - expected_dw).abs() < 1e-5);
        }
    }

    #[test]
    fn zero_upstream_gradient() {
        let geo = ConvGeometry::new(2, 3, 2, 5, 5, 3, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = SparseConvWeights::from_dense(&random_sparse(geo.weight_dims(), 0.5, &mut rng)).unwrap();
        let x = random(geo.input_dims(), &mut rng);
        for v in [ConvVariant::BatchLast, ConvVariant::OverOn] {
            let g = to_layout(&DenseTensor4::zeros(geo.output_dims(), Layout4::Bicmn), v.layout());
            let r = sparse_conv_backward(&to_layout(&x, v.layout()), &w, &g, &geo, v, &KernelCtx::default()).unwrap();
            assert!(r.dx.data().iter().chain(&r.dw_vals).all(|&z| z == 0.0));
        }
    }

    #[test]
    fn matches_oracle_random_instance() {
        check(ConvGeometry::new(4, 6, 5, 9, 9, 3, 1).unwrap(), 0.9, 3, &KernelCtx::default());
    }

    #[test]
    fn matches_oracle_over_pad_kernel_lane_and_threads() {
        let mut seed = 100;
        for pad in 0..3 {
            for k in [1usize, 3, 5] {
                for (b, threads, width) in [(1, 1, 1), (3, 2, 8), (9, 4, 4), (10, 3, 16)] {
                    let m = (k + 2).max(k.saturating_sub(2 * pad));
                    let geo = ConvGeometry::new(b, 3, 4, m, m + 1, k, pad).unwrap();
                    let ctx = KernelCtx::new(LaneSpec::new(width).unwrap(), threads).unwrap();
                    seed += 1;
                    check(geo, 0.5, seed, &ctx);
                }
            }
        }
    }

    #[test]
    fn kernel_wider_than_padded_input() {
        for (m, n) in [(1, 1), (1, 4), (4, 1), (2, 3)] {
            let geo = ConvGeometry::new(3, 2, 3, m, n, 5, 2).unwrap();
            for threads in [1, 2] {
                check(geo, 0.0, 40 + m as u64, &KernelCtx::new(LaneSpec::new(4).unwrap(), threads).unwrap());
            }
        }
    }

    #[test]
    fn layout_and_geometry_errors() {
        let geo = ConvGeometry::new(2, 2, 2, 4, 4, 3, 0).unwrap();
        let w = SparseConvWeights::from_dense(&DenseTensor4::<f32>::zeros(geo.weight_dims(), Layout4::Bicmn)).unwrap();
        let x = DenseTensor4::<f32>::zeros(geo.input_dims(), Layout4::Bicmn);
        let ctx = KernelCtx::default();
        assert!(matches!(
            sparse_conv_forward(&x, &w, &geo, ConvVariant::BatchLast, &ctx),
            Err(Error::LayoutMismatch(_))
        ));
        let other = ConvGeometry::new(2, 2, 3, 4, 4, 3, 0).unwrap();
        assert!(sparse_conv_forward(&x, &w, &other, ConvVariant::OverOn, &ctx).is_err());
        let bad_do = DenseTensor4::<f32>::zeros([2, 2, 3, 2], Layout4::Bicmn);
        assert!(sparse_conv_backward(&x, &w, &bad_do, &geo, ConvVariant::OverOn, &ctx).is_err());
    }

    #[test]
    fn variant_selection() {
        let t = default_variant_threshold(LaneSpec::default());
        assert_eq!(t, 16);
        let small = ConvGeometry::new(8, 128, 256, 7, 7, 3, 0).unwrap();
        assert_eq!(small.on(), 5);
        assert_eq!(select_conv_variant(&small, t), ConvVariant::BatchLast);
        let large = ConvGeometry::new(32, 256, 256, 244, 244, 3, 0).unwrap();
        assert_eq!(select_conv_variant(&large, t), ConvVariant::OverOn);
        let edge = ConvGeometry::new(1, 1, 1, 18, 18, 3, 0).unwrap();
        assert_eq!(edge.on(), 16);
        assert_eq!(select_conv_variant(&edge, t), ConvVariant::OverOn);
    }

    #[test]
    fn counted_work_matches_clipped_windows() {
        let geo = ConvGeometry::new(5, 3, 4, 6, 7, 3, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = SparseConvWeights::from_dense(&random_sparse(geo.weight_dims(), 0.7, &mut rng)).unwrap();
        let x = random(geo.input_dims(), &mut rng);
        let g = random(geo.output_dims(), &mut rng);
        let expected: u64 = (0..w.nnz())
            .map(|s| {
                let ((ps, pe), (qs, qe)) = geo.out_window(w.w_x()[s] as usize, w.w_y()[s] as usize);
                2 * ((pe - ps) * (qe - qs) * geo.b) as u64
            })
            .sum();
        for v in [ConvVariant::BatchLast, ConvVariant::OverOn] {
            for threads in [1, 3] {
                let counter = WorkCounter::new();
                let ctx = KernelCtx::new(LaneSpec::default(), threads).unwrap().with_counter(counter.clone());
                sparse_conv_backward(&to_layout(&x, v.layout()), &w, &to_layout(&g, v.layout()), &geo, v, &ctx).unwrap();
                assert_eq!(counter.fmadds(), expected);
                counter.reset();
                sparse_conv_forward(&to_layout(&x, v.layout()), &w, &geo, v, &ctx).unwrap();
                assert_eq!(counter.fmadds(), expected / 2);
            }
        }
    }
}
