use std::ops::Range;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{DenseTensor4, Layout4};

/// Sparse `OC×IC×KH×KW` filter bank.
///
/// Entries are ordered by output channel, then input channel, then row-major
/// within the filter. `w_och[oc]` is the first entry of output channel `oc`;
/// `w_ich[oc·(IC+1) + ic]` is the offset of input channel `ic` relative to
/// `w_och[oc]`. Kernel coordinates are stored as `u8` and the relative
/// offsets as `u16`, so filters must be smaller than 256 in each direction
/// and each output channel may hold at most `u16::MAX` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseConvWeights<T> {
    oc: usize,
    ic: usize,
    kh: usize,
    kw: usize,
    w_och: Vec<u32>,
    w_ich: Vec<u16>,
    w_x: Vec<u8>,
    w_y: Vec<u8>,
    w_vals: Vec<T>,
}

impl<T: Scalar> SparseConvWeights<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        oc: usize,
        ic: usize,
        kh: usize,
        kw: usize,
        w_och: Vec<u32>,
        w_ich: Vec<u16>,
        w_x: Vec<u8>,
        w_y: Vec<u8>,
        w_vals: Vec<T>,
    ) -> Result<Self> {
        let w = Self { oc, ic, kh, kw, w_och, w_ich, w_x, w_y, w_vals };
        w.validate()?;
        Ok(w)
    }

    /// Keeps every entry that is not exactly zero. `t` must be in `Bicmn`
    /// order, read as `(OC, IC, KH, KW)`.
    pub fn from_dense(t: &DenseTensor4<T>) -> Result<Self> {
        Self::build(t, |_, v| v != T::zero())
    }

    /// Keeps exactly the positions set in `mask` (flat, same order as `t`).
    pub fn from_dense_masked(t: &DenseTensor4<T>, mask: &[bool]) -> Result<Self> {
        if mask.len() != t.len() {
            return Err(Error::LengthMismatch { expected: t.len(), found: mask.len() });
        }
        Self::build(t, |flat, _| mask[flat])
    }

    fn build(t: &DenseTensor4<T>, keep: impl Fn(usize, T) -> bool) -> Result<Self> {
        t.require_layout(Layout4::Bicmn, "filter tensor")?;
        let [oc, ic, kh, kw] = t.dims();
        check_kernel(kh, kw)?;
        let mut w_och = Vec::with_capacity(oc + 1);
        let mut w_ich = Vec::with_capacity(oc * (ic + 1));
        let mut w_x = Vec::new();
        let mut w_y = Vec::new();
        let mut w_vals = Vec::new();
        let data = t.data();
        w_och.push(0u32);
        for o in 0..oc {
            let base = w_vals.len();
            for i in 0..ic {
                w_ich.push(rel_offset(w_vals.len() - base, o)?);
                for x in 0..kh {
                    for y in 0..kw {
                        let flat = ((o * ic + i) * kh + x) * kw + y;
                        if keep(flat, data[flat]) {
                            w_x.push(x as u8);
                            w_y.push(y as u8);
                            w_vals.push(data[flat]);
                        }
                    }
                }
            }
            w_ich.push(rel_offset(w_vals.len() - base, o)?);
            let end = u32::try_from(w_vals.len())
                .map_err(|_| Error::IndexWidthOverflow(format!("nnz {} exceeds u32", w_vals.len())))?;
            w_och.push(end);
        }
        Ok(Self { oc, ic, kh, kw, w_och, w_ich, w_x, w_y, w_vals })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvariantViolation(msg));
        if let Err(e) = check_kernel(self.kh, self.kw) {
            return bad(e.to_string());
        }
        let nnz = self.w_vals.len();
        if self.w_x.len() != nnz || self.w_y.len() != nnz {
            return bad(format!("coordinate arrays ({}, {}) disagree with nnz {nnz}", self.w_x.len(), self.w_y.len()));
        }
        if self.w_och.len() != self.oc + 1 {
            return bad(format!("w_och has {} entries, expected {}", self.w_och.len(), self.oc + 1));
        }
        if self.w_ich.len() != self.oc * (self.ic + 1) {
            return bad(format!("w_ich has {} entries, expected {}", self.w_ich.len(), self.oc * (self.ic + 1)));
        }
        if self.w_och[0] != 0 || self.w_och[self.oc] as usize != nnz {
            return bad("w_och must start at 0 and end at nnz".into());
        }
        for o in 0..self.oc {
            let span = self.w_och[o + 1].checked_sub(self.w_och[o]);
            let Some(span) = span else {
                return bad(format!("w_och decreases at output channel {o}"));
            };
            let seg = &self.w_ich[o * (self.ic + 1)..(o + 1) * (self.ic + 1)];
            if seg[0] != 0 {
                return bad(format!("w_ich segment of output channel {o} does not start at 0"));
            }
            if seg.windows(2).any(|p| p[0] > p[1]) {
                return bad(format!("w_ich decreases in output channel {o}"));
            }
            if seg[self.ic] as u32 != span {
                return bad(format!(
                    "w_ich segment of output channel {o} spans {} entries, w_och spans {span}",
                    seg[self.ic]
                ));
            }
            for i in 0..self.ic {
                let r = self.segment(o, i);
                let mut prev: Option<usize> = None;
                for s in r {
                    let (x, y) = (self.w_x[s] as usize, self.w_y[s] as usize);
                    if x >= self.kh || y >= self.kw {
                        return bad(format!("kernel coordinate ({x}, {y}) out of range"));
                    }
                    let key = x * self.kw + y;
                    if prev.is_some_and(|p| p >= key) {
                        return bad(format!("coordinates not strictly increasing in ({o}, {i})"));
                    }
                    prev = Some(key);
                }
            }
        }
        Ok(())
    }

    pub fn to_dense(&self) -> Result<DenseTensor4<T>> {
        self.validate()?;
        Ok(self.densify_values(&self.w_vals))
    }

    pub(crate) fn densify_values(&self, vals: &[T]) -> DenseTensor4<T> {
        let mut t = DenseTensor4::zeros([self.oc, self.ic, self.kh, self.kw], Layout4::Bicmn);
        for o in 0..self.oc {
            for i in 0..self.ic {
                for s in self.segment(o, i) {
                    t.set([o, i, self.w_x[s] as usize, self.w_y[s] as usize], vals[s]);
                }
            }
        }
        t
    }

    /// Flat support mask in `(OC, IC, KH, KW)` order.
    pub fn mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.oc * self.ic * self.kh * self.kw];
        for o in 0..self.oc {
            for i in 0..self.ic {
                for s in self.segment(o, i) {
                    let flat = ((o * self.ic + i) * self.kh + self.w_x[s] as usize) * self.kw + self.w_y[s] as usize;
                    mask[flat] = true;
                }
            }
        }
        mask
    }

    /// Entry range for the filter connecting input channel `ic` to output
    /// channel `oc`.
    #[inline]
    pub fn segment(&self, oc: usize, ic: usize) -> Range<usize> {
        let base = self.w_och[oc] as usize;
        let row = oc * (self.ic + 1) + ic;
        base + self.w_ich[row] as usize..base + self.w_ich[row + 1] as usize
    }

    /// Entry range of a whole output channel.
    #[inline]
    pub fn out_channel(&self, oc: usize) -> Range<usize> {
        self.w_och[oc] as usize..self.w_och[oc + 1] as usize
    }

    /// Bytes used by the index arrays:
    /// `2·nnz + 2·OC·(IC+1) + 4·(OC+1)`.
    pub fn index_bytes(&self) -> usize {
        std::mem::size_of_val(self.w_och.as_slice())
            + std::mem::size_of_val(self.w_ich.as_slice())
            + std::mem::size_of_val(self.w_x.as_slice())
            + std::mem::size_of_val(self.w_y.as_slice())
    }

    pub fn out_channels(&self) -> usize {
        self.oc
    }

    pub fn in_channels(&self) -> usize {
        self.ic
    }

    pub fn kernel_h(&self) -> usize {
        self.kh
    }

    pub fn kernel_w(&self) -> usize {
        self.kw
    }

    pub fn nnz(&self) -> usize {
        self.w_vals.len()
    }

    pub fn w_och(&self) -> &[u32] {
        &self.w_och
    }

    pub fn w_ich(&self) -> &[u16] {
        &self.w_ich
    }

    pub fn w_x(&self) -> &[u8] {
        &self.w_x
    }

    pub fn w_y(&self) -> &[u8] {
        &self.w_y
    }

    pub fn vals(&self) -> &[T] {
        &self.w_vals
    }

    pub fn vals_mut(&mut self) -> &mut [T] {
        &mut self.w_vals
    }
}

fn check_kernel(kh: usize, kw: usize) -> Result<()> {
    if kh >= 256 || kw >= 256 {
        return Err(Error::IndexWidthOverflow(format!("kernel {kh}x{kw} needs coordinates wider than u8")));
    }
    Ok(())
}

fn rel_offset(v: usize, oc: usize) -> Result<u16> {
    u16::try_from(v).map_err(|_| {
        Error::IndexWidthOverflow(format!("output channel {oc} holds more than {} entries", u16::MAX))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// The six-entry (3,2,2,3) example; values 1..=6 in storage order.
    fn worked_example() -> DenseTensor4<f32> {
        let mut t = DenseTensor4::zeros([3, 2, 2, 3], Layout4::Bicmn);
        t.set([0, 0, 0, 1], 1.0);
        t.set([1, 1, 0, 1], 2.0);
        t.set([1, 1, 1, 1], 3.0);
        t.set([2, 0, 1, 0], 4.0);
        t.set([2, 0, 1, 2], 5.0);
        t.set([2, 1, 0, 2], 6.0);
        t
    }

    #[test]
    fn worked_example_arrays() {
        let w = SparseConvWeights::from_dense(&worked_example()).unwrap();
        assert_eq!(w.w_och(), &[0, 1, 3, 6]);
        assert_eq!(w.w_ich(), &[0, 1, 1, 0, 0, 2, 0, 2, 3]);
        assert_eq!(w.w_x(), &[0, 0, 1, 1, 1, 0]);
        assert_eq!(w.w_y(), &[1, 1, 1, 0, 2, 2]);
        assert_eq!(w.vals(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(w.to_dense().unwrap(), worked_example());
        assert_eq!(w.index_bytes(), 2 * 6 + 2 * 3 * 3 + 4 * 4);
    }

    #[test]
    fn all_zero_bank() {
        let t = DenseTensor4::<f32>::zeros([2, 2, 3, 3], Layout4::Bicmn);
        let w = SparseConvWeights::from_dense(&t).unwrap();
        assert_eq!(w.w_och(), &[0, 0, 0]);
        assert!(w.w_ich().iter().all(|&v| v == 0));
        assert_eq!(w.w_ich().len(), 6);
        assert!(w.w_x().is_empty() && w.w_y().is_empty() && w.vals().is_empty());
        assert_eq!(w.to_dense().unwrap(), t);
    }

    #[test]
    fn kernel_too_wide_is_rejected() {
        let t = DenseTensor4::<f32>::zeros([1, 1, 1, 256], Layout4::Bicmn);
        assert!(matches!(SparseConvWeights::from_dense(&t), Err(Error::IndexWidthOverflow(_))));
    }

    #[test]
    fn channel_overflow_is_rejected() {
        // One output channel with 65536 entries overflows the u16 offsets.
        let t = DenseTensor4::from_vec([1, 256, 16, 16], Layout4::Bicmn, vec![1.0f32; 65536]).unwrap();
        assert!(matches!(SparseConvWeights::from_dense(&t), Err(Error::IndexWidthOverflow(_))));
        let ok = DenseTensor4::from_vec([1, 1, 255, 255], Layout4::Bicmn, vec![1.0f32; 65025]).unwrap();
        assert_eq!(SparseConvWeights::from_dense(&ok).unwrap().nnz(), 65025);
    }

    #[test]
    fn wrong_layout_is_rejected() {
        let t = DenseTensor4::<f32>::zeros([1, 1, 1, 1], Layout4::Icmnb);
        assert!(SparseConvWeights::from_dense(&t).is_err());
    }

    #[test]
    fn validation_rejects_corruption() {
        let w = SparseConvWeights::from_dense(&worked_example()).unwrap();
        let rebuild = |och: Vec<u32>, ich: Vec<u16>, x: Vec<u8>, y: Vec<u8>| {
            SparseConvWeights::from_parts(3, 2, 2, 3, och, ich, x, y, w.vals().to_vec())
        };
        let (och, ich, x, y) = (w.w_och().to_vec(), w.w_ich().to_vec(), w.w_x().to_vec(), w.w_y().to_vec());
        assert!(rebuild(och.clone(), ich.clone(), x.clone(), y.clone()).is_ok());
        assert!(rebuild(vec![0, 3, 1, 6], ich.clone(), x.clone(), y.clone()).is_err());
        // segment of channel 0 claims 2 entries while w_och gives it 1
        let mut long = ich.clone();
        long[2] = 2;
        assert!(rebuild(och.clone(), long, x.clone(), y.clone()).is_err());
        let mut nz_start = ich.clone();
        nz_start[3] = 1;
        assert!(rebuild(och.clone(), nz_start, x.clone(), y.clone()).is_err());
        let mut far = x.clone();
        far[0] = 2;
        assert!(rebuild(och.clone(), ich.clone(), far, y.clone()).is_err());
        // entries 1 and 2 share a filter; (0,1) followed by (0,0) is out of order
        let mut unordered_x = x.clone();
        unordered_x[2] = 0;
        let mut unordered_y = y.clone();
        unordered_y[2] = 0;
        assert!(rebuild(och, ich, unordered_x, unordered_y).is_err());
    }

    #[test]
    fn masked_construction_keeps_zero_positions() {
        let t = DenseTensor4::from_vec([1, 1, 1, 3], Layout4::Bicmn, vec![0.0f32, 5.0, 0.0]).unwrap();
        let w = SparseConvWeights::from_dense_masked(&t, &[true, true, false]).unwrap();
        assert_eq!(w.nnz(), 2);
        assert_eq!(w.mask(), vec![true, true, false]);
    }

    fn random_bank(dims: [usize; 4], density: f64, seed: u64) -> DenseTensor4<f32> {
        let mut s = seed | 1;
        DenseTensor4::from_fn(dims, Layout4::Bicmn, |_| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            let u = (s >> 11) as f64 / (1u64 << 53) as f64;
            if u < density { (u * 40.0 - 0.5) as f32 } else { 0.0 }
        })
    }

    #[test]
    fn random_8_4_3_3_round_trip() {
        let t = random_bank([8, 4, 3, 3], 0.05, 99);
        let w = SparseConvWeights::from_dense(&t).unwrap();
        assert_eq!(w.to_dense().unwrap(), t);
        assert_eq!(w.index_bytes(), 2 * w.nnz() + 2 * 8 * 5 + 4 * 9);
    }

    proptest! {
        #[test]
        fn conv_round_trip(dims in prop::array::uniform4(1usize..7), density in 0.0f64..1.0, seed in any::<u64>()) {
            let t = random_bank(dims, density, seed);
            let w = SparseConvWeights::from_dense(&t).unwrap();
            prop_assert_eq!(w.to_dense().unwrap(), t);
            prop_assert_eq!(w.index_bytes(), 2 * w.nnz() + 2 * dims[0] * (dims[1] + 1) + 4 * (dims[0] + 1));
        }
    }
}
