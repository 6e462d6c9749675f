//! The training loop: SGD with momentum, gradual magnitude pruning at the
//! scheduled epochs, and fixed-mask fine-tuning.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sparseprop::pruning::{gmp_target_at, PruneScope};
use sparseprop::{KernelCtx, LaneSpec};

use crate::bundle::load_pretrained_sparse;
use crate::config::{DataSource, TrainConfig, TrainMode};
use crate::data::{BatchSampler, BlobSpec, Dataset};
use crate::dispatch::DispatchDecision;
use crate::error::{Result, TrainError};
use crate::layer::Activation;
use crate::net::Net;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f32,
    pub mean_loss: f64,
    pub target_sparsity: f64,
    /// Pruned fraction over the layers the schedule may prune.
    pub sparsity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub threads: usize,
    pub steps: usize,
    /// Mean loss over the evaluation samples before training.
    pub initial_loss: f64,
    /// Same, after training.
    pub final_loss: f64,
    /// Pruned fraction over the prunable layers.
    pub sparsity: f64,
    /// Pruned fraction over all weights.
    pub total_sparsity: f64,
    pub layer_sparsity: Vec<f64>,
    pub epochs: Vec<EpochRecord>,
    pub step_losses: Vec<f64>,
    pub dispatch_log: Vec<DispatchDecision>,
}

// Distinct streams derived from the one configured seed.
const DATA_STREAM: u64 = 0;
const INIT_STREAM: u64 = 1;
const ORDER_STREAM: u64 = 2;

fn stream(seed: u64, k: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k)
}

pub fn kernel_ctx(cfg: &TrainConfig) -> Result<KernelCtx> {
    Ok(KernelCtx::new(LaneSpec::new(cfg.lane_width)?, cfg.threads)?)
}

pub fn load_data(cfg: &TrainConfig) -> Result<Dataset> {
    let data = match &cfg.data {
        DataSource::Synthetic { samples, noise } => Dataset::synthetic_blobs(
            BlobSpec { shape: cfg.input, classes: cfg.classes, samples: *samples, noise: *noise },
            stream(cfg.seed, DATA_STREAM),
        )?,
        DataSource::Csv(path) => Dataset::from_csv(path, cfg.input, Some(cfg.classes))?,
    };
    if data.is_empty() {
        return Err(TrainError::Data("dataset is empty".into()));
    }
    Ok(data)
}

/// The initial network for `cfg`: freshly built, or loaded for fixed-mask
/// fine-tuning.
pub fn build_net(cfg: &TrainConfig) -> Result<Net> {
    let mut rng = ChaCha8Rng::seed_from_u64(stream(cfg.seed, INIT_STREAM));
    let mut net = match &cfg.mode {
        TrainMode::FixedMask { model } => load_pretrained_sparse(model, cfg.classes, &mut rng)?,
        _ => Net::build(&cfg.arch, cfg.input, &mut rng)?,
    };
    if net.outputs() != cfg.classes {
        return Err(TrainError::Config(format!("network has {} outputs for {} classes", net.outputs(), cfg.classes)));
    }
    net.set_mode(cfg.dispatch);
    Ok(net)
}

/// Which weighted layers the run may prune.
pub fn eligibility(cfg: &TrainConfig, net: &Net) -> Vec<bool> {
    let n = net.weighted_indices().len();
    match &cfg.mode {
        TrainMode::Gmp(s) => s.scope.default_eligibility(n),
        TrainMode::Dense => vec![true; n],
        // the reinitialized head is trained dense
        TrainMode::FixedMask { .. } => PruneScope::Global.default_eligibility(n).into_iter().enumerate().map(|(i, e)| e && i + 1 != n).collect(),
    }
}

/// Mean loss over the first `cfg.eval_samples` samples; no weights change.
pub fn evaluate(net: &mut Net, data: &Dataset, cfg: &TrainConfig, ctx: &KernelCtx) -> Result<f64> {
    let n = cfg.eval_samples.clamp(1, data.len());
    let idx: Vec<usize> = (0..n).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(cfg.batch_size) {
        let (x, labels) = data.batch(chunk);
        total += net.forward(Activation::Spatial(x), &labels, ctx)? * chunk.len() as f64;
    }
    Ok(total / n as f64)
}

/// Builds data and network from `cfg` and trains.
pub fn train_gmp(cfg: &TrainConfig) -> Result<RunReport> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    let mut net = build_net(cfg)?;
    train(cfg, &mut net, &data)
}

/// Trains `net` on `data` for `cfg.epochs` epochs. In GMP mode each pruning
/// epoch first prunes to the scheduled target, which resets the affected
/// layers' dispatch decisions; after the last pruning epoch the masks stay
/// fixed.
pub fn train(cfg: &TrainConfig, net: &mut Net, data: &Dataset) -> Result<RunReport> {
    let ctx = kernel_ctx(cfg)?;
    net.set_mode(cfg.dispatch);
    let eligible = eligibility(cfg, net);
    let schedule = cfg.schedule();
    let mut sampler = BatchSampler::new(data.len(), stream(cfg.seed, ORDER_STREAM));
    let initial_loss = evaluate(net, data, cfg, &ctx)?;
    let mut step_losses = Vec::with_capacity(cfg.epochs * cfg.steps_per_epoch);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut target = 0.0;
    for epoch in 0..cfg.epochs {
        if let Some(s) = schedule.as_ref().filter(|s| s.is_pruning_epoch(epoch)) {
            target = gmp_target_at(s, epoch);
            net.prune(s.scope, target, &eligible)?;
        }
        let lr = cfg.lr_at(epoch);
        let mut sum = 0.0;
        for _ in 0..cfg.steps_per_epoch {
            let (x, labels) = data.batch(&sampler.next_batch(cfg.batch_size));
            let loss = net.forward(Activation::Spatial(x), &labels, &ctx)?;
            net.backward_and_step(lr, cfg.momentum, &ctx)?;
            step_losses.push(loss);
            sum += loss;
        }
        epochs.push(EpochRecord {
            epoch,
            lr,
            mean_loss: sum / cfg.steps_per_epoch as f64,
            target_sparsity: target,
            sparsity: net.sparsity_over(&eligible),
        });
    }
    let final_loss = evaluate(net, data, cfg, &ctx)?;
    if !final_loss.is_finite() {
        return Err(TrainError::Diverged { step: net.steps(), loss: final_loss });
    }
    Ok(RunReport {
        seed: cfg.seed,
        threads: cfg.threads,
        steps: step_losses.len(),
        initial_loss,
        final_loss,
        sparsity: net.sparsity_over(&eligible),
        total_sparsity: net.sparsity(),
        layer_sparsity: net.layers().iter().filter(|l| l.is_weighted()).map(|l| l.mask_sparsity()).collect(),
        epochs,
        step_losses,
        dispatch_log: net.dispatch_log().to_vec(),
    })
}
