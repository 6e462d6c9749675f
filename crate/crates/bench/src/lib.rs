//! Microbenchmarks of the sparse kernels across sparsity levels.
//!
//! [`run_sweep`] times one operation at several sparsities (optionally with
//! a dense baseline), or counts its fused multiply-adds instead of timing
//! it. [`fit_nnz_linearity`] and [`crossover`] summarize the results, and
//! [`emit`]/[`parse`] move them through CSV or JSON.

mod analysis;
mod record;
mod sweep;

pub use analysis::{crossover, fit_nnz_linearity, monotonicity_inversions, LinearFit};
pub use record::{emit, parse, BenchImpl, BenchRecord, Format, Op, Unit, CSV_HEADER};
pub use sweep::{exact_count_mask, run_sweep, Dims, SweepOptions};

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error(transparent)]
    Kernel(#[from] sparseprop::Error),
    #[error("invalid dims for {op}: {msg}")]
    InvalidDims { op: &'static str, msg: String },
    #[error("{0}")]
    InvalidArgument(String),
    #[error("need at least {need} records, got {got}")]
    InsufficientPoints { need: usize, got: usize },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = BenchError> = std::result::Result<T, E>;
