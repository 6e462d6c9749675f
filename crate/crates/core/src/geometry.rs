use crate::error::{Error, Result};

/// Shape of a stride-1 2-D convolution with symmetric zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvGeometry {
    pub b: usize,
    pub ic: usize,
    pub oc: usize,
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn new(b: usize, ic: usize, oc: usize, m: usize, n: usize, k: usize, pad: usize) -> Result<Self> {
        let g = Self { b, ic, oc, m, n, k, pad };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Geometry("kernel size must be at least 1".into()));
        }
        if self.m + 2 * self.pad < self.k || self.n + 2 * self.pad < self.k {
            return Err(Error::Geometry(format!(
                "{}x{} input with pad {} is smaller than a {}x{} kernel",
                self.m, self.n, self.pad, self.k, self.k
            )));
        }
        Ok(())
    }

    /// Output height `M − K + 1 + 2·pad`.
    pub fn om(&self) -> usize {
        self.m + 2 * self.pad + 1 - self.k
    }

    /// Output width `N − K + 1 + 2·pad`.
    pub fn on(&self) -> usize {
        self.n + 2 * self.pad + 1 - self.k
    }

    /// Logical `(B, IC, M, N)`.
    pub fn input_dims(&self) -> [usize; 4] {
        [self.b, self.ic, self.m, self.n]
    }

    /// Logical `(B, OC, OM, ON)`.
    pub fn output_dims(&self) -> [usize; 4] {
        [self.b, self.oc, self.om(), self.on()]
    }

    pub fn weight_dims(&self) -> [usize; 4] {
        [self.oc, self.ic, self.k, self.k]
    }

    /// Output rows `[p_s, p_e)` touched by kernel row `x`, clipped so the
    /// input row `p + x − pad` stays inside `[0, M)`.
    #[inline]
    pub fn out_rows_for(&self, x: usize) -> (usize, usize) {
        clip(self.pad, x, self.m, self.om())
    }

    /// Output columns `[q_s, q_e)` touched by kernel column `y`.
    #[inline]
    pub fn out_cols_for(&self, y: usize) -> (usize, usize) {
        clip(self.pad, y, self.n, self.on())
    }

    /// Row and column ranges for kernel offset `(x, y)`. When either is
    /// empty the row range is empty too, so callers never index an input
    /// position for a weight that touches no output.
    #[inline]
    pub fn out_window(&self, x: usize, y: usize) -> ((usize, usize), (usize, usize)) {
        let (ps, pe) = self.out_rows_for(x);
        let (qs, qe) = self.out_cols_for(y);
        if qs == qe {
            ((ps, ps), (qs, qe))
        } else {
            ((ps, pe), (qs, qe))
        }
    }
}

#[inline]
fn clip(pad: usize, x: usize, extent: usize, out: usize) -> (usize, usize) {
    let start = pad.saturating_sub(x).min(out);
    let end = (pad + extent).saturating_sub(x).min(out);
    (start, end.max(start))
}
