use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sparseprop::pruning::{PruneScope, SparsityCurve};
use sparseprop::KernelCtx;
use sparseprop_train::*;

fn small_cfg() -> TrainConfig {
    TrainConfig::parse(
        "arch = conv:4:3:1,relu,pool,conv:8:3:1,relu,pool,flatten,linear:4
         input = 1x8x8
         classes = 4
         epochs = 6
         steps_per_epoch = 10
         batch_size = 8
         data_samples = 200
         eval_samples = 64
         gmp_start = 1
         gmp_end = 4
         gmp_step = 1
         gmp_final = 0.9",
        Path::new("."),
    )
    .unwrap()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

#[test]
fn sparse_and_dense_forward_agree() {
    let cfg = small_cfg();
    let data = load_data(&cfg).unwrap();
    let (x, labels) = data.batch(&(0..16).collect::<Vec<_>>());
    let ctx = KernelCtx::default();
    let mut losses = Vec::new();
    for mode in [DispatchMode::ForceDense, DispatchMode::ForceSparse] {
        let mut net = build_net(&cfg).unwrap();
        net.prune(PruneScope::Global, 0.6, &[true, true, true]).unwrap();
        net.set_mode(mode);
        losses.push(net.forward(Activation::Spatial(x.clone()), &labels, &ctx).unwrap());
        let chosen: Vec<_> = net.dispatch_log().iter().map(|d| d.chosen).collect();
        assert_eq!(chosen.iter().all(|c| c.is_sparse()), mode == DispatchMode::ForceSparse);
    }
    assert!(rel(losses[0], losses[1]) <= 1e-5, "{losses:?}");
}

/// Sparse training against dense training with the mask re-applied after
/// every step, under one fixed mask.
#[test]
fn fixed_mask_paths_agree_for_100_steps() {
    let mut cfg = small_cfg();
    cfg.mode = TrainMode::Dense;
    cfg.epochs = 10;
    let data = load_data(&cfg).unwrap();
    let mut runs = Vec::new();
    for mode in [DispatchMode::ForceDense, DispatchMode::ForceSparse] {
        let mut net = build_net(&cfg).unwrap();
        net.prune(PruneScope::Uniform, 0.9, &[true, true, true]).unwrap();
        let masks = net.masks();
        cfg.dispatch = mode;
        let report = train(&cfg, &mut net, &data).unwrap();
        assert_eq!(net.masks(), masks);
        runs.push(report.step_losses);
    }
    assert_eq!(runs[0].len(), 100);
    for (i, (a, b)) in runs[0].iter().zip(&runs[1]).enumerate() {
        assert!(rel(*a, *b) <= 1e-4, "step {i}: {a} vs {b}");
    }
}

#[test]
fn no_pruning_before_start() {
    let mut cfg = small_cfg();
    cfg.mode = TrainMode::Gmp(sparseprop::pruning::GmpSchedule::standard(0.95, PruneScope::Uniform));
    cfg.epochs = 5;
    let r = train_gmp(&cfg).unwrap();
    assert_eq!(r.total_sparsity, 0.0);
    assert!(r.dispatch_log.iter().all(|d| d.chosen == ImplChoice::Dense));
}

#[test]
fn gmp_reaches_target() {
    for scope in [PruneScope::Uniform, PruneScope::Global] {
        let mut cfg = small_cfg();
        if let TrainMode::Gmp(s) = &mut cfg.mode {
            s.scope = scope;
            s.curve = SparsityCurve::Linear;
        }
        let r = train_gmp(&cfg).unwrap();
        assert!((r.sparsity - 0.9).abs() <= 0.01, "{scope:?}: {}", r.sparsity);
        let targets: Vec<f64> = r.epochs.iter().map(|e| e.target_sparsity).collect();
        assert_eq!(targets[0], 0.0);
        assert!(targets.windows(2).all(|w| w[1] >= w[0]));
        assert_eq!(targets[5], 0.9);
        if scope == PruneScope::Uniform {
            // first conv and the head are exempt
            assert_eq!(r.layer_sparsity[0], 0.0);
            assert_eq!(r.layer_sparsity[2], 0.0);
        }
    }
}

#[test]
fn runs_are_deterministic() {
    let cfg = TrainConfig { dispatch: DispatchMode::ForceSparse, ..small_cfg() };
    let a = train_gmp(&cfg).unwrap();
    let b = train_gmp(&cfg).unwrap();
    assert_eq!(a.step_losses, b.step_losses);
    let c = train_gmp(&TrainConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(a.step_losses, c.step_losses);
}

#[test]
fn sparse_transfer_keeps_masks() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_cfg();
    let data = load_data(&cfg).unwrap();
    let mut net = build_net(&cfg).unwrap();
    train(&cfg, &mut net, &data).unwrap();
    save_bundle(&net, dir.path()).unwrap();
    let saved = std::fs::read(dir.path().join("layer_0.sprp")).unwrap();

    let ft = TrainConfig {
        mode: TrainMode::FixedMask { model: dir.path().to_path_buf() },
        classes: 3,
        epochs: 3,
        seed: 11,
        data: DataSource::Synthetic { samples: 120, noise: 0.3 },
        ..small_cfg()
    };
    let data = load_data(&ft).unwrap();
    let mut tuned = build_net(&ft).unwrap();
    let before = tuned.masks();
    let report = train(&ft, &mut tuned, &data).unwrap();
    assert_eq!(tuned.masks(), before);
    assert_eq!(&before[..2], &net.masks()[..2]);
    assert!(report.final_loss < report.initial_loss, "{} -> {}", report.initial_loss, report.final_loss);

    let out = tempfile::tempdir().unwrap();
    save_bundle(&tuned, out.path()).unwrap();
    let resaved = sparseprop::format::deserialize(&std::fs::read(out.path().join("layer_0.sprp")).unwrap()).unwrap();
    let original = sparseprop::format::deserialize(&saved).unwrap();
    let (sparseprop::SparseObject::Conv(a), sparseprop::SparseObject::Conv(b)) = (resaved, original) else { panic!() };
    assert_eq!((a.w_och(), a.w_ich(), a.w_x(), a.w_y()), (b.w_och(), b.w_ich(), b.w_x(), b.w_y()));
}

#[test]
fn empty_bundle_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(load_pretrained_sparse(dir.path(), 3, &mut rng).is_err());
}

/// Reports a fixed time per implementation; the probe still runs.
struct FakeTimer {
    sparse_ns: u64,
    probes: std::sync::Arc<std::sync::atomic::AtomicUsize>,
}

impl ProbeTimer for FakeTimer {
    fn measure(&mut self, _: usize, choice: ImplChoice, run: &mut dyn FnMut() -> Result<()>) -> Result<u64> {
        run()?;
        self.probes.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        Ok(if choice.is_sparse() { self.sparse_ns } else { 100 })
    }
}

#[test]
fn auto_dispatch_in_training() {
    for (sparse_ns, want_sparse) in [(10, true), (1000, false)] {
        let cfg = small_cfg();
        let data = load_data(&cfg).unwrap();
        let mut net = build_net(&cfg).unwrap();
        let probes = std::sync::Arc::new(std::sync::atomic::AtomicUsize::new(0));
        net.set_timer(Box::new(FakeTimer { sparse_ns, probes: probes.clone() }));
        let r = train(&cfg, &mut net, &data).unwrap();
        for d in &r.dispatch_log {
            if d.sparsity < SPARSITY_THRESHOLD {
                assert!(!d.probed() && d.chosen == ImplChoice::Dense);
            } else {
                assert!(d.probed());
                let min = d.timings.iter().map(|t| t.ns).min().unwrap();
                assert_eq!(d.timing(d.chosen), Some(min));
                assert_eq!(d.chosen.is_sparse(), want_sparse);
            }
        }
        // only the middle conv crosses the threshold, re-probed at each
        // pruning epoch from 0.8 on
        let probed: Vec<_> = r.dispatch_log.iter().filter(|d| d.probed()).collect();
        assert!(!probed.is_empty() && probed.iter().all(|d| d.layer == 3));
        assert_eq!(probes.load(std::sync::atomic::Ordering::Relaxed), probed.len() * 3);
    }
}

#[test]
fn report_serializes() {
    let cfg = TrainConfig { epochs: 1, ..small_cfg() };
    let r = train_gmp(&cfg).unwrap();
    let json = serde_json::to_string(&r).unwrap();
    let back: RunReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back.step_losses.len(), 10);
    assert_eq!(back.steps, r.steps);
}
