//! Fixed-width lane groups standing in for SIMD registers.
//!
//! Kernels are written once against `[T; W]` groups (`vload`, `vbroadcast`,
//! `vfmadd`, `vstore`, `vaddreduce`) with a scalar tail for the remainder of a
//! span. Each supported width is monomorphized so the compiler can map the
//! groups onto vector registers.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const DEFAULT_LANE_WIDTH: usize = 8;
pub const MAX_LANE_WIDTH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LaneSpec {
    width: usize,
}

impl LaneSpec {
    pub fn new(width: usize) -> Result<Self> {
        if width == 0 || !width.is_power_of_two() || width > MAX_LANE_WIDTH {
            return Err(Error::InvalidArgument(format!(
                "lane width must be a power of two in [1, {MAX_LANE_WIDTH}], got {width}"
            )));
        }
        Ok(Self { width })
    }

    /// Width 1: every kernel degrades to its scalar path.
    pub const fn scalar() -> Self {
        Self { width: 1 }
    }

    pub fn width(&self) -> usize {
        self.width
    }
}

impl Default for LaneSpec {
    fn default() -> Self {
        Self { width: DEFAULT_LANE_WIDTH }
    }
}

/// Expands `$body` with `const $w: usize` bound to the runtime lane width.
macro_rules! with_lane_width {
    ($spec:expr, $w:ident => $body:expr) => {{
        match $spec.width() {
            1 => { const $w: usize = 1; $body }
            2 => { const $w: usize = 2; $body }
            4 => { const $w: usize = 4; $body }
            8 => { const $w: usize = 8; $body }
            16 => { const $w: usize = 16; $body }
            32 => { const $w: usize = 32; $body }
            64 => { const $w: usize = 64; $body }
            w => unreachable!("unsupported lane width {w}"),
        }
    }};
}
pub(crate) use with_lane_width;

/// `dst[k] ← src[k]·s + dst[k]` over lane groups then a scalar tail.
#[inline(always)]
pub(crate) fn fmadd_into<T: Scalar, const W: usize>(dst: &mut [T], src: &[T], s: T) {
    debug_assert_eq!(dst.len(), src.len());
    let v = [s; W];
    let mut d = dst.chunks_exact_mut(W);
    let mut a = src.chunks_exact(W);
    for (dg, ag) in (&mut d).zip(&mut a) {
        let mut r = [T::zero(); W];
        for l in 0..W {
            r[l] = ag[l] * v[l] + dg[l];
        }
        dg.copy_from_slice(&r);
    }
    for (dt, &at) in d.into_remainder().iter_mut().zip(a.remainder()) {
        *dt = at * s + *dt;
    }
}

/// Lane accumulator plus a scalar accumulator for span tails.
#[derive(Clone, Copy)]
pub(crate) struct LaneAcc<T, const W: usize> {
    lanes: [T; W],
    tail: T,
}

impl<T: Scalar, const W: usize> LaneAcc<T, W> {
    #[inline(always)]
    pub(crate) fn new() -> Self {
        Self { lanes: [T::zero(); W], tail: T::zero() }
    }

    /// Pairwise left-to-right sum of the lanes, then the tail.
    #[inline(always)]
    pub(crate) fn reduce(self) -> T {
        let mut lanes = self.lanes;
        let mut n = W;
        while n > 1 {
            n /= 2;
            for i in 0..n {
                lanes[i] = lanes[2 * i] + lanes[2 * i + 1];
            }
        }
        lanes[0] + self.tail
    }

    /// `acc ← a·b + acc` over a span.
    #[inline(always)]
    pub(crate) fn dot(&mut self, a: &[T], b: &[T]) {
        debug_assert_eq!(a.len(), b.len());
        let mut ai = a.chunks_exact(W);
        let mut bi = b.chunks_exact(W);
        let mut acc = self.lanes;
        for (ag, bg) in (&mut ai).zip(&mut bi) {
            for l in 0..W {
                acc[l] = ag[l] * bg[l] + acc[l];
            }
        }
        self.lanes = acc;
        for (&x, &y) in ai.remainder().iter().zip(bi.remainder()) {
            self.tail = x * y + self.tail;
        }
    }

    /// The two-fmadd step shared by both backward kernels:
    /// `dx ← dout·w + dx` and `acc ← dout·x + acc`.
    #[inline(always)]
    pub(crate) fn fused(&mut self, dx: &mut [T], dout: &[T], x: &[T], w: T) {
        debug_assert!(dx.len() == dout.len() && dout.len() == x.len());
        let v = [w; W];
        let mut acc = self.lanes;
        let mut dxi = dx.chunks_exact_mut(W);
        let mut doi = dout.chunks_exact(W);
        let mut xi = x.chunks_exact(W);
        for ((dxg, dog), xg) in (&mut dxi).zip(&mut doi).zip(&mut xi) {
            let mut r = [T::zero(); W];
            for l in 0..W {
                r[l] = dog[l] * v[l] + dxg[l];
                acc[l] = dog[l] * xg[l] + acc[l];
            }
            dxg.copy_from_slice(&r);
        }
        self.lanes = acc;
        for ((dxt, &dot), &xt) in dxi.into_remainder().iter_mut().zip(doi.remainder()).zip(xi.remainder()) {
            *dxt = dot * w + *dxt;
            self.tail = dot * xt + self.tail;
        }
    }
}

/// `out[k] = a[k]·b + c[k]`, identical for every lane width.
pub fn lane_fmadd_span<T: Scalar>(a: &[T], b: T, c: &[T], spec: LaneSpec) -> Result<Vec<T>> {
    if a.len() != c.len() {
        return Err(Error::LengthMismatch { expected: a.len(), found: c.len() });
    }
    let mut out = c.to_vec();
    with_lane_width!(spec, W => fmadd_into::<T, W>(&mut out, a, b));
    Ok(out)
}

/// Lane-grouped dot product with the fixed reduction order of [`LaneSpec`].
pub fn lane_dot<T: Scalar>(a: &[T], b: &[T], spec: LaneSpec) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch { expected: a.len(), found: b.len() });
    }
    Ok(with_lane_width!(spec, W => {
        let mut acc = LaneAcc::<T, W>::new();
        acc.dot(a, b);
        acc.reduce()
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lane_spec_validation() {
        assert!(LaneSpec::new(0).is_err());
        assert!(LaneSpec::new(3).is_err());
        assert!(LaneSpec::new(128).is_err());
        assert_eq!(LaneSpec::new(16).unwrap().width(), 16);
        assert_eq!(LaneSpec::default().width(), 8);
    }

    #[test]
    fn zero_multiplier_returns_addend() {
        let out = lane_fmadd_span(&[1.0f32, 2.0], 0.0, &[3.0, 4.0], LaneSpec::default()).unwrap();
        assert_eq!(out, vec![3.0, 4.0]);
    }

    #[test]
    fn scales_ones() {
        let out = lane_fmadd_span(&[1.0f32; 3], 2.0, &[0.0; 3], LaneSpec::default()).unwrap();
        assert_eq!(out, vec![2.0; 3]);
    }

    #[test]
    fn length_mismatch_rejected() {
        assert!(lane_fmadd_span(&[1.0f32; 3], 2.0, &[0.0; 2], LaneSpec::default()).is_err());
        assert!(lane_dot(&[1.0f32; 3], &[0.0; 2], LaneSpec::default()).is_err());
    }

    #[test]
    fn fmadd_width_independent_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a: Vec<f32> = (0..21).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c: Vec<f32> = (0..21).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b = rng.random_range(-2.0f32..2.0);
        let scalar = lane_fmadd_span(&a, b, &c, LaneSpec::scalar()).unwrap();
        for w in [2, 4, 8, 16, 32, 64] {
            let out = lane_fmadd_span(&a, b, &c, LaneSpec::new(w).unwrap()).unwrap();
            assert!(out.iter().zip(&scalar).all(|(x, y)| x.to_bits() == y.to_bits()), "width {w}");
        }
    }

    #[test]
    fn dot_width_agreement() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a: Vec<f32> = (0..37).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..37).map(|_| rng.random_range(-1.0..1.0)).collect();
        let exact: f64 = a.iter().zip(&b).map(|(&x, &y)| x as f64 * y as f64).sum();
        let scalar = lane_dot(&a, &b, LaneSpec::scalar()).unwrap();
        let wide = lane_dot(&a, &b, LaneSpec::new(8).unwrap()).unwrap();
        assert!((scalar as f64 - exact).abs() < 1e-5);
        assert!((wide as f64 - exact).abs() < 1e-5);
        assert!((wide - scalar).abs() <= 1e-5 * scalar.abs().max(1.0));
    }

    #[test]
    fn reduce_is_pairwise() {
        let mut acc = LaneAcc::<f64, 4>::new();
        acc.dot(&[1.0, 2.0, 3.0, 4.0, 5.0], &[1.0; 5]);
        assert_eq!(acc.reduce(), 15.0);
    }

    #[test]
    fn fused_matches_separate_ops() {
        let dout = [1.0f64, 2.0, 3.0, 4.0, 5.0];
        let x = [0.5f64, -1.0, 2.0, 0.0, 1.0];
        let mut dx = [1.0f64; 5];
        let mut acc = LaneAcc::<f64, 2>::new();
        acc.fused(&mut dx, &dout, &x, 2.0);
        assert_eq!(dx, [3.0, 5.0, 7.0, 9.0, 11.0]);
        assert_eq!(acc.reduce(), 0.5 - 2.0 + 6.0 + 0.0 + 5.0);
    }
}
