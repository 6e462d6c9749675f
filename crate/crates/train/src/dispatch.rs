//! Per-layer choice between the dense and sparse kernels, made by timing
//! one forward+backward pass of each candidate on a real batch.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use sparseprop::{select_conv_variant, default_variant_threshold, ConvVariant, KernelCtx};

use crate::error::{Result, TrainError};
use crate::layer::{Activation, LayerKind, LayerNode};

/// Layers pruned less than this stay dense without probing.
pub const SPARSITY_THRESHOLD: f64 = 0.80;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ImplChoice {
    #[serde(rename = "dense")]
    Dense,
    #[serde(rename = "sparse-linear")]
    SparseLinear,
    #[serde(rename = "sparse-batchlast")]
    SparseBatchLast,
    #[serde(rename = "sparse-overON")]
    SparseOverOn,
}

impl ImplChoice {
    pub fn name(self) -> &'static str {
        match self {
            ImplChoice::Dense => "dense",
            ImplChoice::SparseLinear => "sparse-linear",
            ImplChoice::SparseBatchLast => "sparse-batchlast",
            ImplChoice::SparseOverOn => "sparse-overON",
        }
    }

    pub fn is_sparse(self) -> bool {
        self != ImplChoice::Dense
    }

    pub fn from_variant(v: ConvVariant) -> Self {
        match v {
            ConvVariant::BatchLast => ImplChoice::SparseBatchLast,
            ConvVariant::OverOn => ImplChoice::SparseOverOn,
        }
    }

    pub fn conv_variant(self) -> Option<ConvVariant> {
        match self {
            ImplChoice::SparseBatchLast => Some(ConvVariant::BatchLast),
            ImplChoice::SparseOverOn => Some(ConvVariant::OverOn),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DispatchMode {
    Auto,
    ForceDense,
    ForceSparse,
}

impl std::str::FromStr for DispatchMode {
    type Err = TrainError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(Self::Auto),
            "force-dense" => Ok(Self::ForceDense),
            "force-sparse" => Ok(Self::ForceSparse),
            _ => Err(TrainError::Config(format!("unknown dispatch mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeTiming {
    #[serde(rename = "impl")]
    pub choice: ImplChoice,
    pub ns: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispatchDecision {
    pub layer: usize,
    pub sparsity: f64,
    pub mode: DispatchMode,
    /// One entry per candidate; empty when no probe ran.
    pub timings: Vec<ProbeTiming>,
    pub chosen: ImplChoice,
}

impl DispatchDecision {
    pub fn probed(&self) -> bool {
        !self.timings.is_empty()
    }

    pub fn dense_ns(&self) -> Option<u64> {
        self.timing(ImplChoice::Dense)
    }

    pub fn timing(&self, choice: ImplChoice) -> Option<u64> {
        self.timings.iter().find(|t| t.choice == choice).map(|t| t.ns)
    }
}

/// Measures one probe run. Implementations must call `run` exactly once and
/// propagate its error.
pub trait ProbeTimer: Send {
    fn measure(&mut self, layer: usize, choice: ImplChoice, run: &mut dyn FnMut() -> Result<()>) -> Result<u64>;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct WallClock;

impl ProbeTimer for WallClock {
    fn measure(&mut self, _layer: usize, _choice: ImplChoice, run: &mut dyn FnMut() -> Result<()>) -> Result<u64> {
        let t = Instant::now();
        run()?;
        Ok((t.elapsed().as_nanos() as u64).max(1))
    }
}

/// The sparse kernels that can run `layer` on input `x`, default first.
pub fn sparse_candidates(layer: &LayerNode, x: &Activation, ctx: &KernelCtx) -> Vec<ImplChoice> {
    match layer.kind() {
        LayerKind::Linear { .. } => vec![ImplChoice::SparseLinear],
        LayerKind::Conv2d { .. } => {
            let preferred = layer
                .conv_geometry(x)
                .map(|g| select_conv_variant(&g, default_variant_threshold(ctx.lane())))
                .unwrap_or(ConvVariant::OverOn);
            let other = match preferred {
                ConvVariant::BatchLast => ConvVariant::OverOn,
                ConvVariant::OverOn => ConvVariant::BatchLast,
            };
            vec![ImplChoice::from_variant(preferred), ImplChoice::from_variant(other)]
        }
        _ => Vec::new(),
    }
}

/// Decides how `layer` runs. Forced modes never probe. In auto mode a layer
/// below `threshold` sparsity stays dense unprobed; otherwise dense and each
/// sparse candidate run once on `probe_input` and the fastest wins, ties
/// going to the earlier candidate.
pub fn dispatch_layer(
    layer: &LayerNode,
    id: usize,
    probe_input: &Activation,
    ctx: &KernelCtx,
    mode: DispatchMode,
    threshold: f64,
    timer: &mut dyn ProbeTimer,
) -> Result<DispatchDecision> {
    if !layer.is_weighted() {
        return Err(TrainError::Config(format!("layer {id} ({}) has no weights to dispatch", layer.kind().token())));
    }
    let sparsity = layer.mask_sparsity();
    let decided = |chosen, timings| DispatchDecision { layer: id, sparsity, mode, timings, chosen };
    let candidates = sparse_candidates(layer, probe_input, ctx);
    match mode {
        DispatchMode::ForceDense => return Ok(decided(ImplChoice::Dense, Vec::new())),
        DispatchMode::ForceSparse => return Ok(decided(candidates[0], Vec::new())),
        DispatchMode::Auto if sparsity < threshold => return Ok(decided(ImplChoice::Dense, Vec::new())),
        DispatchMode::Auto => {}
    }
    let prepared = layer.prepare_probe()?;
    let mut timings = Vec::with_capacity(candidates.len() + 1);
    for choice in std::iter::once(ImplChoice::Dense).chain(candidates) {
        let ns = timer.measure(id, choice, &mut || layer.probe(id, &prepared, choice, probe_input, ctx))?;
        timings.push(ProbeTiming { choice, ns });
    }
    let best = timings.iter().fold(timings[0], |a, &t| if t.ns < a.ns { t } else { a });
    Ok(decided(best.choice, timings))
}
