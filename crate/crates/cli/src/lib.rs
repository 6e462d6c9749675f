//! Argument definitions and command bodies for the `sparseprop` binary.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use sparseprop::LaneSpec;
use sparseprop_bench::{crossover, emit, fit_nnz_linearity, run_sweep, BenchImpl, BenchRecord, Dims, Format, Op, SweepOptions};
use sparseprop_train::{save_bundle, train, build_net, load_data, DispatchMode, RunReport, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "sparseprop", version, about = "Sparse backpropagation kernels: benchmarks and training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Time (or count) one kernel across sparsity levels.
    Bench(BenchArgs),
    /// Train a small network from a config file.
    Train(TrainArgs),
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// linear-fwd, linear-bwd, conv-fwd or conv-bwd
    #[arg(long)]
    pub op: String,
    /// M,N,B for linear ops; B,IC,M,N,OC,K[,PAD] for conv ops
    #[arg(long, value_delimiter = ',', required = true)]
    pub dims: Vec<usize>,
    #[arg(long, value_delimiter = ',', required = true)]
    pub sparsities: Vec<f64>,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    #[arg(long, default_value_t = 10)]
    pub repeats: usize,
    #[arg(long, default_value_t = 3)]
    pub warmup: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// csv or json
    #[arg(long, default_value = "csv")]
    pub format: String,
    /// Also measure the dense implementation.
    #[arg(long)]
    pub compare_dense: bool,
    /// Record counted fused multiply-adds instead of wall-clock time.
    #[arg(long)]
    pub count_flops: bool,
    #[arg(long, default_value_t = 8)]
    pub lane_width: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, conflicts_with = "force_sparse")]
    pub force_dense: bool,
    #[arg(long)]
    pub force_sparse: bool,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write the trained model as a bundle directory.
    #[arg(long)]
    pub save_model: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn bench(args: &BenchArgs) -> Result<Vec<BenchRecord>> {
    let op: Op = args.op.parse()?;
    let format: Format = args.format.parse()?;
    let dims = Dims::parse(op, &args.dims)?;
    let opts = SweepOptions {
        threads: args.threads,
        repeats: args.repeats,
        warmup: args.warmup,
        seed: args.seed,
        compare_dense: args.compare_dense,
        count_flops: args.count_flops,
        lane: LaneSpec::new(args.lane_width)?,
    };
    let records = run_sweep(op, &dims, &args.sparsities, &opts)?;
    std::fs::write(&args.out, emit(&records, format)?).with_context(|| format!("writing {}", args.out.display()))?;
    Ok(records)
}

/// Human-readable fit and crossover lines for a sweep.
pub fn summarize(records: &[BenchRecord]) -> Vec<String> {
    let dense = records.iter().find(|r| r.implementation == BenchImpl::Dense);
    let mut impls: Vec<BenchImpl> = Vec::new();
    for r in records {
        if r.implementation != BenchImpl::Dense && !impls.contains(&r.implementation) {
            impls.push(r.implementation);
        }
    }
    let mut lines = Vec::new();
    for imp in impls {
        let group: Vec<BenchRecord> = records.iter().filter(|r| r.implementation == imp).cloned().collect();
        let name = imp.name();
        match fit_nnz_linearity(&group) {
            Ok(f) => lines.push(format!("{name}: median = {:.4} * nnz + {:.1}, r2 = {:.6}", f.slope, f.intercept, f.r2)),
            Err(e) => lines.push(format!("{name}: no fit ({e})")),
        }
        if let Some(d) = dense {
            match crossover(&group, d) {
                Ok(Some(s)) => lines.push(format!("{name}: matches dense from sparsity {s}")),
                Ok(None) => lines.push(format!("{name}: slower than dense at every measured sparsity")),
                Err(e) => lines.push(format!("{name}: no crossover ({e})")),
            }
        }
    }
    lines
}

pub fn train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::from_file(&args.config)?;
    if args.force_dense {
        cfg.dispatch = DispatchMode::ForceDense;
    }
    if args.force_sparse {
        cfg.dispatch = DispatchMode::ForceSparse;
    }
    if let Some(t) = args.threads {
        cfg.threads = t;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn train_cmd(args: &TrainArgs) -> Result<RunReport> {
    let cfg = train_config(args)?;
    let data = load_data(&cfg)?;
    let mut net = build_net(&cfg)?;
    let report = train(&cfg, &mut net, &data)?;
    std::fs::write(&args.out, serde_json::to_vec_pretty(&report)?).with_context(|| format!("writing {}", args.out.display()))?;
    if let Some(dir) = &args.save_model {
        save_bundle(&net, dir)?;
    }
    if !report.final_loss.is_finite() {
        bail!("final loss is not finite");
    }
    Ok(report)
}
