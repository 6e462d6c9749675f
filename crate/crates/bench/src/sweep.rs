use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sparseprop::dense::{
    dense_conv_backward_im2col, dense_conv_forward_im2col, dense_linear_backward_t, dense_linear_forward_t,
};
use sparseprop::{
    permute4d, sparse_conv_backward, sparse_conv_forward, sparse_linear_backward, sparse_linear_forward, ConvGeometry,
    ConvVariant, ConvWeights, Csr, KernelCtx, LaneSpec, Layout4, Matrix, Tensor4, WorkCounter,
};

use crate::record::{BenchImpl, BenchRecord, Op, Unit};
use crate::{BenchError, Result};

/// Problem size of one benchmarked layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dims {
    /// Weights `M×N`, batch `B`.
    Linear { m: usize, n: usize, b: usize },
    Conv(ConvGeometry),
}

impl Dims {
    /// `M,N,B` for linear ops; `B,IC,M,N,OC,K[,PAD]` for conv ops, with
    /// padding 0 when omitted.
    pub fn parse(op: Op, v: &[usize]) -> Result<Self> {
        let bad = |msg: String| BenchError::InvalidDims { op: op.name(), msg };
        if v.iter().any(|&x| x == 0) {
            return Err(bad(format!("{v:?} has a zero extent")));
        }
        match (op.is_conv(), v) {
            (false, &[m, n, b]) => Ok(Dims::Linear { m, n, b }),
            (true, &[b, ic, m, n, oc, k]) => Ok(Dims::Conv(ConvGeometry::new(b, ic, oc, m, n, k, 0).map_err(|e| bad(e.to_string()))?)),
            (true, &[b, ic, m, n, oc, k, pad]) => {
                Ok(Dims::Conv(ConvGeometry::new(b, ic, oc, m, n, k, pad).map_err(|e| bad(e.to_string()))?))
            }
            (false, _) => Err(bad(format!("expected M,N,B, got {v:?}"))),
            (true, _) => Err(bad(format!("expected B,IC,M,N,OC,K[,PAD], got {v:?}"))),
        }
    }

    pub fn weight_size(&self) -> usize {
        match self {
            Dims::Linear { m, n, .. } => m * n,
            Dims::Conv(g) => g.oc * g.ic * g.k * g.k,
        }
    }

    pub fn label(&self) -> String {
        match self {
            Dims::Linear { m, n, b } => format!("{m}x{n}x{b}"),
            Dims::Conv(g) => format!("{}x{}x{}x{}x{}x{}x{}", g.b, g.ic, g.m, g.n, g.oc, g.k, g.pad),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepOptions {
    pub threads: usize,
    pub repeats: usize,
    pub warmup: usize,
    pub seed: u64,
    /// Also time the dense implementation once per call.
    pub compare_dense: bool,
    /// Count fused multiply-adds instead of timing; runs each kernel once.
    pub count_flops: bool,
    pub lane: LaneSpec,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self { threads: 1, repeats: 10, warmup: 3, seed: 0, compare_dense: false, count_flops: false, lane: LaneSpec::default() }
    }
}

/// `⌊(1 − s)·size⌋`, nudged so products that are integers in exact
/// arithmetic do not round down.
pub(crate) fn keep_count(size: usize, sparsity: f64) -> usize {
    (((1.0 - sparsity) * size as f64 + 1e-9).floor() as usize).min(size)
}

/// Exactly `⌊(1 − s)·size⌋` kept positions, drawn uniformly without
/// replacement; deterministic in `(seed, s)`.
pub fn exact_count_mask(size: usize, sparsity: f64, seed: u64) -> Vec<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ sparsity.to_bits().rotate_left(17));
    let mut mask = vec![false; size];
    for i in rand::seq::index::sample(&mut rng, size, keep_count(size, sparsity)) {
        mask[i] = true;
    }
    mask
}

fn normal_vec(n: usize, rng: &mut impl Rng) -> Vec<f32> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Times `f` `warmup + repeats` times and returns the median and
/// interquartile range of the timed runs.
fn time_runs(warmup: usize, repeats: usize, mut f: impl FnMut() -> Result<()>) -> Result<(f64, f64)> {
    for _ in 0..warmup {
        f()?;
    }
    let mut ns = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        f()?;
        ns.push((t.elapsed().as_nanos() as f64).max(1.0));
    }
    ns.sort_by(f64::total_cmp);
    Ok((quantile(&ns, 0.5), quantile(&ns, 0.75) - quantile(&ns, 0.25)))
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Runs one kernel under the sweep's measurement mode.
fn measure(opts: &SweepOptions, ctx: &KernelCtx, mut f: impl FnMut(&KernelCtx) -> Result<()>) -> Result<(f64, f64, Unit)> {
    if opts.count_flops {
        let counter = WorkCounter::new();
        f(&ctx.clone().with_counter(counter.clone()))?;
        Ok((counter.fmadds() as f64, 0.0, Unit::Fmadd))
    } else {
        let (median, iqr) = time_runs(opts.warmup, opts.repeats, || f(ctx))?;
        Ok((median, iqr, Unit::Ns))
    }
}

struct Inputs {
    /// `Xᵀ` / `dOᵀ` for linear ops.
    xt: Matrix,
    dot: Matrix,
    /// `(B, IC, M, N)` input and `(B, OC, OM, ON)` output gradient.
    x: Tensor4,
    d_out: Tensor4,
}

fn make_inputs(dims: &Dims, seed: u64) -> Result<Inputs> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(match dims {
        Dims::Linear { m, n, b } => Inputs {
            xt: Matrix::from_vec(*m, *b, normal_vec(m * b, &mut rng))?,
            dot: Matrix::from_vec(*n, *b, normal_vec(n * b, &mut rng))?,
            x: Tensor4::zeros([0; 4], Layout4::Bicmn),
            d_out: Tensor4::zeros([0; 4], Layout4::Bicmn),
        },
        Dims::Conv(g) => {
            let (id, od) = (g.input_dims(), g.output_dims());
            Inputs {
                xt: Matrix::zeros(0, 0),
                dot: Matrix::zeros(0, 0),
                x: Tensor4::from_vec(id, Layout4::Bicmn, normal_vec(id.iter().product(), &mut rng))?,
                d_out: Tensor4::from_vec(od, Layout4::Bicmn, normal_vec(od.iter().product(), &mut rng))?,
            }
        }
    })
}

/// Benchmarks `op` at each sparsity. Conv ops time both sparse variants.
/// With `compare_dense` the dense kernel is measured once and recorded at
/// sparsity 0.
pub fn run_sweep(op: Op, dims: &Dims, sparsities: &[f64], opts: &SweepOptions) -> Result<Vec<BenchRecord>> {
    if matches!(dims, Dims::Conv(_)) != op.is_conv() {
        return Err(BenchError::InvalidDims { op: op.name(), msg: format!("{} does not describe this op", dims.label()) });
    }
    if !opts.count_flops && opts.repeats < 3 {
        return Err(BenchError::InvalidArgument(format!("repeats must be at least 3, got {}", opts.repeats)));
    }
    if let Some(s) = sparsities.iter().find(|s| !(0.0..1.0).contains(*s)) {
        return Err(BenchError::InvalidArgument(format!("sparsity {s} outside [0, 1)")));
    }
    let ctx = KernelCtx::new(opts.lane, opts.threads)?;
    let inputs = make_inputs(dims, opts.seed)?;
    let size = dims.weight_size();
    let record = |implementation, sparsity, nnz, (median_ns, iqr_ns, unit): (f64, f64, Unit)| BenchRecord {
        op,
        implementation,
        dims: dims.label(),
        sparsity,
        nnz,
        threads: opts.threads,
        repeats: if opts.count_flops { 1 } else { opts.repeats },
        warmup: if opts.count_flops { 0 } else { opts.warmup },
        median_ns,
        iqr_ns,
        seed: opts.seed,
        unit,
    };
    let mut out = Vec::new();
    let weights = |sparsity: f64| {
        let mask = exact_count_mask(size, sparsity, opts.seed);
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(1) ^ sparsity.to_bits());
        let vals = mask.iter().map(|&k| if k { StandardNormal.sample(&mut rng) } else { 0.0 }).collect::<Vec<f32>>();
        (vals, mask)
    };
    if opts.compare_dense {
        let (vals, _) = weights(0.0);
        let m = measure(opts, &ctx, |ctx| run_dense(op, dims, &inputs, &vals, ctx))?;
        out.push(record(BenchImpl::Dense, 0.0, size, m));
    }
    for &s in sparsities {
        let (vals, mask) = weights(s);
        let nnz = mask.iter().filter(|&&k| k).count();
        match dims {
            Dims::Linear { m, n, .. } => {
                let w = Csr::from_dense_masked(&Matrix::from_vec(*m, *n, vals)?, &mask)?;
                let res = measure(opts, &ctx, |ctx| {
                    if op.is_backward() {
                        sparse_linear_backward(&inputs.xt, &w, &inputs.dot, ctx)?;
                    } else {
                        sparse_linear_forward(&inputs.xt, &w, ctx)?;
                    }
                    Ok(())
                })?;
                out.push(record(BenchImpl::SparseLinear, s, nnz, res));
            }
            Dims::Conv(g) => {
                let w = ConvWeights::from_dense_masked(&Tensor4::from_vec(g.weight_dims(), Layout4::Bicmn, vals)?, &mask)?;
                for variant in [ConvVariant::BatchLast, ConvVariant::OverOn] {
                    let (x, d) = match variant {
                        ConvVariant::BatchLast => (permute4d(&inputs.x, Layout4::Icmnb)?, permute4d(&inputs.d_out, Layout4::Icmnb)?),
                        ConvVariant::OverOn => (inputs.x.clone(), inputs.d_out.clone()),
                    };
                    let res = measure(opts, &ctx, |ctx| {
                        if op.is_backward() {
                            sparse_conv_backward(&x, &w, &d, g, variant, ctx)?;
                        } else {
                            sparse_conv_forward(&x, &w, g, variant, ctx)?;
                        }
                        Ok(())
                    })?;
                    let implementation = match variant {
                        ConvVariant::BatchLast => BenchImpl::SparseBatchLast,
                        ConvVariant::OverOn => BenchImpl::SparseOverOn,
                    };
                    out.push(record(implementation, s, nnz, res));
                }
            }
        }
    }
    Ok(out)
}

fn run_dense(op: Op, dims: &Dims, inputs: &Inputs, vals: &[f32], ctx: &KernelCtx) -> Result<()> {
    match dims {
        Dims::Linear { m, n, .. } => {
            let w = Matrix::from_vec(*m, *n, vals.to_vec())?;
            if op.is_backward() {
                dense_linear_backward_t(&inputs.xt, &w, &inputs.dot, ctx)?;
            } else {
                dense_linear_forward_t(&inputs.xt, &w, ctx)?;
            }
        }
        Dims::Conv(g) => {
            let w = Tensor4::from_vec(g.weight_dims(), Layout4::Bicmn, vals.to_vec())?;
            if op.is_backward() {
                dense_conv_backward_im2col(&inputs.x, &w, &inputs.d_out, g, ctx)?;
            } else {
                dense_conv_forward_im2col(&inputs.x, &w, g, ctx)?;
            }
        }
    }
    Ok(())
}
