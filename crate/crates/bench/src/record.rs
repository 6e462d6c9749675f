use serde::{Deserialize, Serialize};

use crate::{BenchError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Op {
    #[serde(rename = "linear-fwd")]
    LinearFwd,
    #[serde(rename = "linear-bwd")]
    LinearBwd,
    #[serde(rename = "conv-fwd")]
    ConvFwd,
    #[serde(rename = "conv-bwd")]
    ConvBwd,
}

impl Op {
    pub fn name(self) -> &'static str {
        match self {
            Op::LinearFwd => "linear-fwd",
            Op::LinearBwd => "linear-bwd",
            Op::ConvFwd => "conv-fwd",
            Op::ConvBwd => "conv-bwd",
        }
    }

    pub fn is_conv(self) -> bool {
        matches!(self, Op::ConvFwd | Op::ConvBwd)
    }

    pub fn is_backward(self) -> bool {
        matches!(self, Op::LinearBwd | Op::ConvBwd)
    }
}

impl std::str::FromStr for Op {
    type Err = BenchError;
    fn from_str(s: &str) -> Result<Self> {
        [Op::LinearFwd, Op::LinearBwd, Op::ConvFwd, Op::ConvBwd]
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| BenchError::InvalidArgument(format!("unknown op {s:?}")))
    }
}

impl std::fmt::Display for Op {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BenchImpl {
    #[serde(rename = "dense")]
    Dense,
    #[serde(rename = "sparse-batchlast")]
    SparseBatchLast,
    #[serde(rename = "sparse-overON")]
    SparseOverOn,
    #[serde(rename = "sparse-linear")]
    SparseLinear,
}

impl BenchImpl {
    pub fn name(self) -> &'static str {
        match self {
            BenchImpl::Dense => "dense",
            BenchImpl::SparseBatchLast => "sparse-batchlast",
            BenchImpl::SparseOverOn => "sparse-overON",
            BenchImpl::SparseLinear => "sparse-linear",
        }
    }
}

/// What `median_ns` and `iqr_ns` measure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unit {
    /// Wall-clock nanoseconds.
    Ns,
    /// Counted lane-element fused multiply-adds.
    Fmadd,
}

/// One measured configuration. CSV columns follow field order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub op: Op,
    #[serde(rename = "impl")]
    pub implementation: BenchImpl,
    /// `x`-separated extents: `MxNxB` for linear ops,
    /// `BxICxMxNxOCxKxPAD` for conv ops.
    pub dims: String,
    pub sparsity: f64,
    pub nnz: usize,
    pub threads: usize,
    pub repeats: usize,
    pub warmup: usize,
    pub median_ns: f64,
    pub iqr_ns: f64,
    pub seed: u64,
    pub unit: Unit,
}

pub const CSV_HEADER: [&str; 12] =
    ["op", "impl", "dims", "sparsity", "nnz", "threads", "repeats", "warmup", "median_ns", "iqr_ns", "seed", "unit"];

impl BenchRecord {
    /// Checks `median_ns > 0` and that `nnz` is `⌊(1 − sparsity)·size⌋` for
    /// the weight size implied by `dims` (dense records store every weight).
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(BenchError::InvalidArgument(m));
        if !(self.median_ns > 0.0) || self.iqr_ns < 0.0 {
            return bad(format!("median {} / iqr {} out of range", self.median_ns, self.iqr_ns));
        }
        let ext: Vec<usize> = self
            .dims
            .split('x')
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|_| BenchError::InvalidArgument(format!("dims {:?}", self.dims)))?;
        let size = match (self.op.is_conv(), &ext[..]) {
            (false, [m, n, _]) => m * n,
            (true, [_, ic, _, _, oc, k, _]) => oc * ic * k * k,
            _ => return bad(format!("dims {:?} do not fit {}", self.dims, self.op)),
        };
        let want = crate::sweep::keep_count(size, self.sparsity);
        if self.nnz != want {
            return bad(format!("nnz {} for size {size} at sparsity {} (expected {want})", self.nnz, self.sparsity));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

impl std::str::FromStr for Format {
    type Err = BenchError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            _ => Err(BenchError::InvalidArgument(format!("unknown format {s:?}"))),
        }
    }
}

/// CSV always carries the header row, even with no records.
pub fn emit(records: &[BenchRecord], format: Format) -> Result<Vec<u8>> {
    match format {
        Format::Json => Ok(serde_json::to_vec_pretty(records)?),
        Format::Csv => {
            let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
            w.write_record(CSV_HEADER)?;
            for r in records {
                w.serialize(r)?;
            }
            w.into_inner().map_err(|e| BenchError::InvalidArgument(e.to_string()))
        }
    }
}

pub fn parse(bytes: &[u8], format: Format) -> Result<Vec<BenchRecord>> {
    match format {
        Format::Json => Ok(serde_json::from_slice(bytes)?),
        Format::Csv => {
            let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
            let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
            if header != CSV_HEADER {
                return Err(BenchError::InvalidArgument(format!("unexpected CSV header {header:?}")));
            }
            Ok(r.deserialize().collect::<Result<_, _>>()?)
        }
    }
}
