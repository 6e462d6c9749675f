//! Execution context shared by the sparse and dense kernels.

use std::ops::Range;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::lanes::LaneSpec;

/// Counts inner-loop multiply-adds in lane-element units: one lane group of
/// width `w` counts as `w`, a scalar tail step as 1.
#[derive(Debug, Default)]
pub struct WorkCounter(AtomicU64);

impl WorkCounter {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn fmadds(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.0.store(0, Ordering::Relaxed);
    }

    pub(crate) fn add(&self, n: u64) {
        self.0.fetch_add(n, Ordering::Relaxed);
    }
}

#[derive(Debug, Clone)]
pub struct KernelCtx {
    lane: LaneSpec,
    threads: usize,
    counter: Option<Arc<WorkCounter>>,
}

impl KernelCtx {
    pub fn new(lane: LaneSpec, threads: usize) -> Result<Self> {
        if threads == 0 {
            return Err(Error::InvalidArgument("thread count must be at least 1".into()));
        }
        Ok(Self { lane, threads, counter: None })
    }

    pub fn with_counter(mut self, counter: Arc<WorkCounter>) -> Self {
        self.counter = Some(counter);
        self
    }

    pub fn lane(&self) -> LaneSpec {
        self.lane
    }

    pub fn threads(&self) -> usize {
        self.threads
    }

    pub fn counter(&self) -> Option<&Arc<WorkCounter>> {
        self.counter.as_ref()
    }

    #[inline]
    pub(crate) fn count(&self, n: u64) {
        if let Some(c) = &self.counter {
            c.add(n);
        }
    }
}

impl Default for KernelCtx {
    fn default() -> Self {
        Self { lane: LaneSpec::default(), threads: 1, counter: None }
    }
}

/// Splits `0..len` into at most `parts` contiguous, non-empty ranges whose
/// boundaries fall on multiples of `align` (except the final end).
pub(crate) fn partition(len: usize, parts: usize, align: usize) -> Vec<Range<usize>> {
    if len == 0 {
        return vec![0..0];
    }
    let align = align.max(1);
    let chunk = len.div_ceil(parts.max(1)).div_ceil(align) * align;
    (0..len).step_by(chunk).map(|s| s..(s + chunk).min(len)).collect()
}

/// Splits `data` into consecutive mutable pieces of the given lengths.
pub(crate) fn split_lengths<'a, T>(mut data: &'a mut [T], lens: impl IntoIterator<Item = usize>) -> Vec<&'a mut [T]> {
    let mut out = Vec::new();
    for len in lens {
        let (head, tail) = std::mem::take(&mut data).split_at_mut(len);
        out.push(head);
        data = tail;
    }
    out
}
