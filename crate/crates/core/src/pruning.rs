//! Magnitude pruning and the gradual-magnitude-pruning schedule.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// One weight tensor offered to a pruning pass, flattened.
#[derive(Debug, Clone, Copy)]
pub struct PrunableLayer<'a, T> {
    pub weights: &'a [T],
    /// Ineligible layers are kept whole.
    pub eligible: bool,
}

impl<'a, T> PrunableLayer<'a, T> {
    pub fn new(weights: &'a [T], eligible: bool) -> Self {
        Self { weights, eligible }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PruneMask {
    layers: Vec<Vec<bool>>,
    eligible: Vec<bool>,
}

impl PruneMask {
    pub fn all_kept(sizes: &[usize]) -> Self {
        Self { layers: sizes.iter().map(|&n| vec![true; n]).collect(), eligible: vec![true; sizes.len()] }
    }

    pub fn layers(&self) -> &[Vec<bool>] {
        &self.layers
    }

    pub fn layer(&self, i: usize) -> &[bool] {
        &self.layers[i]
    }

    pub fn into_layers(self) -> Vec<Vec<bool>> {
        self.layers
    }

    pub fn total(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    pub fn kept(&self) -> usize {
        self.layers.iter().map(|l| l.iter().filter(|&&k| k).count()).sum()
    }

    /// Fraction of pruned entries over all layers.
    pub fn sparsity(&self) -> f64 {
        fraction_pruned(self.layers.iter())
    }

    /// Fraction of pruned entries over the layers that were eligible.
    pub fn eligible_sparsity(&self) -> f64 {
        fraction_pruned(self.layers.iter().zip(&self.eligible).filter(|(_, &e)| e).map(|(l, _)| l))
    }

    pub fn layer_sparsity(&self, i: usize) -> f64 {
        fraction_pruned(std::iter::once(&self.layers[i]))
    }
}

fn fraction_pruned<'a>(layers: impl Iterator<Item = &'a Vec<bool>>) -> f64 {
    let (mut kept, mut total) = (0usize, 0usize);
    for l in layers {
        total += l.len();
        kept += l.iter().filter(|&&k| k).count();
    }
    if total == 0 { 0.0 } else { 1.0 - kept as f64 / total as f64 }
}

fn check_target(target: f64) -> Result<()> {
    if !(0.0..1.0).contains(&target) {
        return Err(Error::InvalidArgument(format!("target sparsity must be in [0, 1), got {target}")));
    }
    Ok(())
}

/// Number of entries to keep out of `size` at sparsity `target`:
/// `⌈(1 − target)·size⌉`, computed as `size − ⌊target·size⌋` to avoid
/// rounding up a product that is an integer in exact arithmetic.
pub fn keep_count(size: usize, target: f64) -> usize {
    size - ((target * size as f64 + 1e-9).floor() as usize).min(size)
}

/// Marks the `keep` largest-magnitude entries; ties keep the smaller index.
fn keep_largest<T: Scalar>(values: impl Iterator<Item = T>, keep: usize) -> Vec<bool> {
    let mags: Vec<T> = values.map(|v| v.abs()).collect();
    let mut order: Vec<usize> = (0..mags.len()).collect();
    order.sort_by(|&a, &b| mags[b].partial_cmp(&mags[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    let mut mask = vec![false; mags.len()];
    for &i in order.iter().take(keep) {
        mask[i] = true;
    }
    mask
}

/// Prunes every eligible layer independently to `target`.
pub fn magnitude_prune_uniform<T: Scalar>(layers: &[PrunableLayer<'_, T>], target: f64) -> Result<PruneMask> {
    if layers.is_empty() {
        return Err(Error::InvalidArgument("no layers to prune".into()));
    }
    check_target(target)?;
    let masks = layers
        .iter()
        .map(|l| {
            if l.eligible {
                keep_largest(l.weights.iter().copied(), keep_count(l.weights.len(), target))
            } else {
                vec![true; l.weights.len()]
            }
        })
        .collect();
    Ok(PruneMask { layers: masks, eligible: layers.iter().map(|l| l.eligible).collect() })
}

/// Prunes all eligible layers jointly with one magnitude ranking.
pub fn magnitude_prune_global<T: Scalar>(layers: &[PrunableLayer<'_, T>], target: f64) -> Result<PruneMask> {
    if layers.is_empty() {
        return Err(Error::InvalidArgument("no layers to prune".into()));
    }
    check_target(target)?;
    let pool = layers.iter().filter(|l| l.eligible).flat_map(|l| l.weights.iter().copied());
    let total: usize = layers.iter().filter(|l| l.eligible).map(|l| l.weights.len()).sum();
    let flat = keep_largest(pool, keep_count(total, target));
    let mut offset = 0;
    let masks = layers
        .iter()
        .map(|l| {
            if l.eligible {
                let m = flat[offset..offset + l.weights.len()].to_vec();
                offset += l.weights.len();
                m
            } else {
                vec![true; l.weights.len()]
            }
        })
        .collect();
    Ok(PruneMask { layers: masks, eligible: layers.iter().map(|l| l.eligible).collect() })
}

/// Zeroes every entry outside the mask.
pub fn apply_mask<T: Scalar>(weights: &mut [T], mask: &[bool]) -> Result<()> {
    if weights.len() != mask.len() {
        return Err(Error::LengthMismatch { expected: weights.len(), found: mask.len() });
    }
    for (w, &keep) in weights.iter_mut().zip(mask) {
        if !keep {
            *w = T::zero();
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PruneScope {
    Uniform,
    Global,
}

impl PruneScope {
    /// Uniform pruning spares the first and last weighted layers; global
    /// pruning ranks every layer.
    pub fn default_eligibility(self, weighted_layers: usize) -> Vec<bool> {
        match self {
            PruneScope::Global => vec![true; weighted_layers],
            PruneScope::Uniform => (0..weighted_layers).map(|i| i != 0 && i + 1 != weighted_layers).collect(),
        }
    }

    pub fn prune<T: Scalar>(self, layers: &[PrunableLayer<'_, T>], target: f64) -> Result<PruneMask> {
        match self {
            PruneScope::Uniform => magnitude_prune_uniform(layers, target),
            PruneScope::Global => magnitude_prune_global(layers, target),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SparsityCurve {
    /// `s_i + (s_f − s_i)·(1 − (1 − t)³)`
    Cubic,
    /// `s_i + (s_f − s_i)·t`
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GmpSchedule {
    pub start_epoch: usize,
    pub end_epoch: usize,
    pub step: usize,
    pub initial_sparsity: f64,
    pub final_sparsity: f64,
    pub finetune_epochs: usize,
    pub scope: PruneScope,
    pub curve: SparsityCurve,
}

impl GmpSchedule {
    /// Dense until epoch 10, prune every 10 epochs through epoch 80 starting
    /// at 5%, then 20 fine-tuning epochs.
    pub fn standard(final_sparsity: f64, scope: PruneScope) -> Self {
        Self {
            start_epoch: 10,
            end_epoch: 80,
            step: 10,
            initial_sparsity: 0.05,
            final_sparsity,
            finetune_epochs: 20,
            scope,
            curve: SparsityCurve::Cubic,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if self.step == 0 {
            return bad("pruning step must be at least 1 epoch");
        }
        if self.end_epoch < self.start_epoch {
            return bad("end epoch precedes start epoch");
        }
        if !(0.0..1.0).contains(&self.final_sparsity)
            || !(0.0..=self.final_sparsity).contains(&self.initial_sparsity)
        {
            return bad("sparsities must satisfy 0 <= initial <= final < 1");
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.end_epoch + self.finetune_epochs
    }

    pub fn is_pruning_epoch(&self, epoch: usize) -> bool {
        epoch >= self.start_epoch
            && epoch <= self.end_epoch
            && ((epoch - self.start_epoch) % self.step == 0 || epoch == self.end_epoch)
    }
}

/// Target sparsity in effect during `epoch`: zero before the first pruning
/// epoch, the curve value of the most recent pruning epoch in between, and
/// the final sparsity from the last pruning epoch on.
pub fn gmp_target_at(schedule: &GmpSchedule, epoch: usize) -> f64 {
    if epoch < schedule.start_epoch {
        return 0.0;
    }
    if epoch >= schedule.end_epoch {
        return schedule.final_sparsity;
    }
    let last = schedule.start_epoch + (epoch - schedule.start_epoch) / schedule.step * schedule.step;
    let t = (last - schedule.start_epoch) as f64 / (schedule.end_epoch - schedule.start_epoch) as f64;
    let (si, sf) = (schedule.initial_sparsity, schedule.final_sparsity);
    match schedule.curve {
        SparsityCurve::Cubic => si + (sf - si) * (1.0 - (1.0 - t).powi(3)),
        SparsityCurve::Linear => si + (sf - si) * t,
    }
}
