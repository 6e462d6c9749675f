//! A sequential network of [`LayerNode`]s with softmax cross-entropy loss.

use rand::Rng;
use sparseprop::pruning::{PrunableLayer, PruneMask, PruneScope};
use sparseprop::{KernelCtx, Matrix};

use crate::data::InputShape;
use crate::dispatch::{dispatch_layer, DispatchDecision, DispatchMode, ProbeTimer, WallClock, SPARSITY_THRESHOLD};
use crate::error::{shape, Result, TrainError};
use crate::layer::{Activation, LayerKind, LayerNode};

/// One token of an architecture string such as
/// `conv:8:3:1,relu,pool,flatten,linear:10`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    /// `conv:<out_channels>:<kernel>:<pad>`
    Conv { out_channels: usize, kernel: usize, pad: usize },
    Relu,
    /// `pool`, 2×2 max pooling.
    Pool,
    Flatten,
    /// `linear:<outputs>`
    Linear { outputs: usize },
}

impl std::str::FromStr for LayerSpec {
    type Err = TrainError;
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let num = |p: &str| {
            p.parse::<usize>()
                .ok()
                .filter(|&v| v > 0 || parts[0] == "conv")
                .ok_or_else(|| TrainError::Config(format!("bad number {p:?} in layer {s:?}")))
        };
        match parts[..] {
            ["conv", oc, k, pad] => {
                let (out_channels, kernel, pad) = (num(oc)?, num(k)?, num(pad)?);
                if out_channels == 0 || kernel == 0 {
                    return Err(TrainError::Config(format!("layer {s:?} needs positive channels and kernel")));
                }
                Ok(LayerSpec::Conv { out_channels, kernel, pad })
            }
            ["relu"] => Ok(LayerSpec::Relu),
            ["pool"] => Ok(LayerSpec::Pool),
            ["flatten"] => Ok(LayerSpec::Flatten),
            ["linear", n] => Ok(LayerSpec::Linear { outputs: num(n)? }),
            _ => Err(TrainError::Config(format!("unknown layer {s:?}"))),
        }
    }
}

pub fn parse_arch(s: &str) -> Result<Vec<LayerSpec>> {
    let specs = s.split(',').filter(|t| !t.trim().is_empty()).map(str::parse).collect::<Result<Vec<_>>>()?;
    if specs.is_empty() {
        return Err(TrainError::Config("empty architecture".into()));
    }
    Ok(specs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    Spatial { c: usize, h: usize, w: usize },
    Flat(usize),
}

/// Resolves specs against an input shape into layer kinds.
pub fn resolve_arch(specs: &[LayerSpec], input: InputShape) -> Result<Vec<LayerKind>> {
    let mut s = Shape::Spatial { c: input.channels, h: input.height, w: input.width };
    let mut kinds = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        let (kind, next) = match (*spec, s) {
            (LayerSpec::Conv { out_channels, kernel, pad }, Shape::Spatial { c, h, w }) => {
                if h + 2 * pad < kernel || w + 2 * pad < kernel {
                    return Err(shape(i, format!("kernel {kernel} does not fit {h}x{w} with pad {pad}")));
                }
                (
                    LayerKind::Conv2d { in_channels: c, out_channels, kernel, pad },
                    Shape::Spatial { c: out_channels, h: h + 2 * pad + 1 - kernel, w: w + 2 * pad + 1 - kernel },
                )
            }
            (LayerSpec::Relu, s) => (LayerKind::Relu, s),
            (LayerSpec::Pool, Shape::Spatial { c, h, w }) if h >= 2 && w >= 2 => {
                (LayerKind::MaxPool2x2, Shape::Spatial { c, h: h / 2, w: w / 2 })
            }
            (LayerSpec::Flatten, Shape::Spatial { c, h, w }) => (LayerKind::Flatten, Shape::Flat(c * h * w)),
            (LayerSpec::Linear { outputs }, Shape::Flat(f)) => (LayerKind::Linear { inputs: f, outputs }, Shape::Flat(outputs)),
            (spec, s) => return Err(shape(i, format!("{spec:?} cannot follow {s:?}"))),
        };
        kinds.push(kind);
        s = next;
    }
    match s {
        Shape::Flat(_) => Ok(kinds),
        _ => Err(shape(specs.len(), "network must end in a flat layer")),
    }
}

pub struct Net {
    input: InputShape,
    layers: Vec<LayerNode>,
    mode: DispatchMode,
    threshold: f64,
    timer: Box<dyn ProbeTimer>,
    log: Vec<DispatchDecision>,
    pending: Option<Activation>,
    steps: usize,
}

impl std::fmt::Debug for Net {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Net")
            .field("input", &self.input)
            .field("layers", &self.layers.iter().map(|l| l.kind()).collect::<Vec<_>>())
            .field("mode", &self.mode)
            .finish_non_exhaustive()
    }
}

/// Mean softmax cross-entropy over the batch of a `classes × B` logit
/// matrix, and its gradient.
pub fn softmax_cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let (k, b) = (logits.rows(), logits.cols());
    if labels.len() != b || b == 0 {
        return Err(TrainError::Data(format!("{} labels for a batch of {b}", labels.len())));
    }
    let mut grad = Matrix::zeros(k, b);
    let mut loss = 0.0f64;
    for (j, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(TrainError::Data(format!("label {y} out of range for {k} classes")));
        }
        let col: Vec<f64> = (0..k).map(|i| logits.get(i, j) as f64).collect();
        let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = col.iter().map(|v| (v - max).exp()).sum();
        loss += z.ln() + max - col[y];
        for (i, v) in col.iter().enumerate() {
            let p = (v - max).exp() / z;
            let target = if i == y { 1.0 } else { 0.0 };
            grad.set(i, j, ((p - target) / b as f64) as f32);
        }
    }
    Ok((loss / b as f64, grad))
}

impl Net {
    pub fn new(input: InputShape, layers: Vec<LayerNode>) -> Result<Self> {
        if layers.is_empty() {
            return Err(TrainError::Config("network has no layers".into()));
        }
        let kinds: Vec<LayerKind> = layers.iter().map(|l| l.kind()).collect();
        let specs: Vec<LayerSpec> = kinds.iter().map(|k| k.token().parse()).collect::<Result<_>>()?;
        if resolve_arch(&specs, input)? != kinds {
            return Err(TrainError::Config("layer shapes do not chain from the input".into()));
        }
        Ok(Self {
            input,
            layers,
            mode: DispatchMode::Auto,
            threshold: SPARSITY_THRESHOLD,
            timer: Box::new(WallClock),
            log: Vec::new(),
            pending: None,
            steps: 0,
        })
    }

    /// Builds a freshly initialized network.
    pub fn build(specs: &[LayerSpec], input: InputShape, rng: &mut impl Rng) -> Result<Self> {
        let layers = resolve_arch(specs, input)?
            .into_iter()
            .map(|k| match k {
                LayerKind::Relu => Ok(LayerNode::relu()),
                LayerKind::MaxPool2x2 => Ok(LayerNode::max_pool()),
                LayerKind::Flatten => Ok(LayerNode::flatten()),
                k => LayerNode::init_weighted(k, rng),
            })
            .collect::<Result<_>>()?;
        Self::new(input, layers)
    }

    pub fn input(&self) -> InputShape {
        self.input
    }

    pub fn layers(&self) -> &[LayerNode] {
        &self.layers
    }

    pub fn outputs(&self) -> usize {
        self.layers
            .iter()
            .rev()
            .find_map(|l| match l.kind() {
                LayerKind::Linear { outputs, .. } => Some(outputs),
                _ => None,
            })
            .unwrap_or(0)
    }

    pub fn set_mode(&mut self, mode: DispatchMode) {
        if mode != self.mode {
            self.mode = mode;
            self.invalidate_decisions();
        }
    }

    pub fn mode(&self) -> DispatchMode {
        self.mode
    }

    pub fn set_threshold(&mut self, threshold: f64) {
        self.threshold = threshold;
        self.invalidate_decisions();
    }

    pub fn set_timer(&mut self, timer: Box<dyn ProbeTimer>) {
        self.timer = timer;
    }

    fn invalidate_decisions(&mut self) {
        self.layers.iter_mut().for_each(LayerNode::clear_decision);
    }

    pub fn dispatch_log(&self) -> &[DispatchDecision] {
        &self.log
    }

    pub fn weighted_indices(&self) -> Vec<usize> {
        (0..self.layers.len()).filter(|&i| self.layers[i].is_weighted()).collect()
    }

    pub fn masks(&self) -> Vec<Vec<bool>> {
        self.layers.iter().filter_map(|l| l.mask().map(<[bool]>::to_vec)).collect()
    }

    pub fn dense_weights(&self) -> Vec<Vec<f32>> {
        self.layers.iter().filter_map(LayerNode::dense_weights).collect()
    }

    /// Installs one mask per weighted layer, in layer order.
    pub fn set_masks(&mut self, masks: Vec<Vec<bool>>) -> Result<()> {
        let idx = self.weighted_indices();
        if masks.len() != idx.len() {
            return Err(TrainError::Config(format!("{} masks for {} weighted layers", masks.len(), idx.len())));
        }
        for (i, m) in idx.into_iter().zip(masks) {
            self.layers[i].set_mask(m)?;
        }
        Ok(())
    }

    /// Magnitude-prunes the current weights and installs the result.
    pub fn prune(&mut self, scope: PruneScope, target: f64, eligible: &[bool]) -> Result<PruneMask> {
        let weights = self.dense_weights();
        if eligible.len() != weights.len() {
            return Err(TrainError::Config(format!("{} eligibility flags for {} layers", eligible.len(), weights.len())));
        }
        let layers: Vec<PrunableLayer<'_, f32>> =
            weights.iter().zip(eligible).map(|(w, &e)| PrunableLayer::new(w, e)).collect();
        let mask = scope.prune(&layers, target)?;
        self.set_masks(mask.layers().to_vec())?;
        Ok(mask)
    }

    /// Pruned fraction over all weights.
    pub fn sparsity(&self) -> f64 {
        self.sparsity_where(|_| true)
    }

    /// Pruned fraction over the weighted layers flagged in `eligible`.
    pub fn sparsity_over(&self, eligible: &[bool]) -> f64 {
        self.sparsity_where(|i| eligible.get(i).copied().unwrap_or(false))
    }

    fn sparsity_where(&self, keep: impl Fn(usize) -> bool) -> f64 {
        let (mut pruned, mut total) = (0usize, 0usize);
        for (_, m) in self.masks().iter().enumerate().filter(|(i, _)| keep(*i)) {
            total += m.len();
            pruned += m.iter().filter(|&&k| !k).count();
        }
        if total == 0 { 0.0 } else { pruned as f64 / total as f64 }
    }

    /// Replaces the last linear layer with a fresh dense one of `classes`
    /// outputs.
    pub fn reinit_head(&mut self, classes: usize, rng: &mut impl Rng) -> Result<()> {
        let i = self
            .layers
            .iter()
            .rposition(|l| matches!(l.kind(), LayerKind::Linear { .. }))
            .ok_or_else(|| TrainError::Config("network has no linear head".into()))?;
        let LayerKind::Linear { inputs, .. } = self.layers[i].kind() else { unreachable!() };
        if i + 1 != self.layers.len() {
            return Err(TrainError::Config("the linear head must be the last layer".into()));
        }
        self.layers[i] = LayerNode::init_weighted(LayerKind::Linear { inputs, outputs: classes }, rng)?;
        Ok(())
    }

    fn check_input(&self, x: &Activation) -> Result<()> {
        match x {
            Activation::Spatial(t) if t.layout() == sparseprop::Layout4::Bicmn => {
                let [_, c, h, w] = t.logical_dims();
                if InputShape::new(c, h, w) == self.input {
                    return Ok(());
                }
                Err(shape(0, format!("input {c}x{h}x{w}, network expects {}", self.input)))
            }
            other => Err(shape(0, format!("network input must be (B, C, H, W), got {}", other.describe()))),
        }
    }

    /// Runs every layer, dispatching weighted layers that have no current
    /// decision on their actual input, and caches the loss gradient.
    pub fn forward(&mut self, x: Activation, labels: &[usize], ctx: &KernelCtx) -> Result<f64> {
        self.check_input(&x)?;
        self.pending = None;
        let mut a = x;
        for (i, layer) in self.layers.iter_mut().enumerate() {
            if layer.is_weighted() && layer.decision().is_none() {
                let d = dispatch_layer(layer, i, &a, ctx, self.mode, self.threshold, self.timer.as_mut())?;
                layer.apply_decision(d.clone())?;
                self.log.push(d);
            }
            a = layer.forward(i, a, ctx)?;
        }
        let logits = match a {
            Activation::Flat(m) => m,
            other => return Err(shape(self.layers.len(), format!("logits must be flat, got {}", other.describe()))),
        };
        let (loss, grad) = softmax_cross_entropy(&logits, labels)?;
        if !loss.is_finite() {
            return Err(TrainError::Diverged { step: self.steps, loss });
        }
        self.pending = Some(Activation::Flat(grad));
        Ok(loss)
    }

    /// Backpropagates the cached loss gradient and applies SGD with
    /// momentum to every layer.
    pub fn backward_and_step(&mut self, lr: f32, momentum: f32, ctx: &KernelCtx) -> Result<()> {
        let mut g = self.pending.take().ok_or(TrainError::MissingForwardCache(self.layers.len()))?;
        for (i, layer) in self.layers.iter_mut().enumerate().rev() {
            g = layer.backward_and_step(i, g, lr, momentum, ctx)?;
        }
        self.steps += 1;
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.steps
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use sparseprop::{Layout4, Tensor4};

    proptest! {
        #[test]
        fn cross_entropy_gradient_columns_sum_to_zero(
            (k, b, logits, labels) in (1usize..8, 1usize..6).prop_flat_map(|(k, b)| (
                Just(k),
                Just(b),
                prop::collection::vec(-30.0f32..30.0, k * b),
                prop::collection::vec(0..k, b),
            ))
        ) {
            let (loss, grad) = softmax_cross_entropy(&Matrix::from_vec(k, b, logits).unwrap(), &labels).unwrap();
            prop_assert!(loss >= 0.0 && loss.is_finite());
            for (j, &y) in labels.iter().enumerate() {
                let sum: f64 = (0..k).map(|i| grad.get(i, j) as f64).sum();
                prop_assert!(sum.abs() < 1e-6, "column {} sums to {}", j, sum);
                prop_assert!(grad.get(y, j) <= 0.0);
                prop_assert!((0..k).all(|i| grad.get(i, j).abs() <= 1.0 / b as f32 + 1e-6));
            }
        }
    }

    #[test]
    fn arch_parsing() {
        let a = parse_arch("conv:8:3:1, relu,pool,flatten,linear:10").unwrap();
        assert_eq!(a[0], LayerSpec::Conv { out_channels: 8, kernel: 3, pad: 1 });
        assert_eq!(a[4], LayerSpec::Linear { outputs: 10 });
        for bad in ["", "conv:8:3", "linear:0", "softmax", "conv:0:3:0"] {
            assert!(parse_arch(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn shape_chain_errors() {
        let input = InputShape::new(1, 4, 4);
        assert!(resolve_arch(&parse_arch("linear:3").unwrap(), input).is_err());
        assert!(resolve_arch(&parse_arch("flatten,flatten").unwrap(), input).is_err());
        assert!(resolve_arch(&parse_arch("conv:2:3:0").unwrap(), input).is_err());
        assert!(resolve_arch(&parse_arch("conv:2:7:0,flatten,linear:2").unwrap(), input).is_err());
        let kinds = resolve_arch(&parse_arch("conv:2:3:0,pool,flatten,linear:3").unwrap(), input).unwrap();
        assert_eq!(kinds[3], LayerKind::Linear { inputs: 2, outputs: 3 });
    }

    #[test]
    fn cross_entropy_matches_hand_value() {
        let logits = Matrix::from_rows(&[&[1.0, 0.0], &[2.0, 0.0], &[0.5, 0.0]]).unwrap();
        let (loss, g) = softmax_cross_entropy(&logits, &[1, 2]).unwrap();
        let z0: f64 = [1.0f64, 2.0, 0.5].iter().map(|v| v.exp()).sum();
        let want = ((z0.ln() - 2.0) + 3f64.ln()) / 2.0;
        assert!((loss - want).abs() < 1e-12);
        let col_sum: f32 = (0..3).map(|i| g.get(i, 0)).sum();
        assert!(col_sum.abs() < 1e-7);
        assert!(softmax_cross_entropy(&logits, &[3, 0]).is_err());
        assert!(softmax_cross_entropy(&logits, &[0]).is_err());
    }

    #[test]
    fn identity_linear_loss() {
        let kind = LayerKind::Linear { inputs: 3, outputs: 3 };
        let eye = Matrix::identity(3).into_vec();
        let net_layers = vec![LayerNode::flatten(), LayerNode::weighted(kind, eye, vec![0.0; 3], vec![true; 9]).unwrap()];
        let mut net = Net::new(InputShape::new(3, 1, 1), net_layers).unwrap();
        let x = Tensor4::from_vec([1, 3, 1, 1], Layout4::Bicmn, vec![0.2, 1.5, -0.3]).unwrap();
        let loss = net.forward(Activation::Spatial(x), &[1], &KernelCtx::default()).unwrap();
        let z: f64 = [0.2f64, 1.5, -0.3].iter().map(|v| (*v as f32 as f64).exp()).sum();
        assert!((loss - (z.ln() - 1.5f32 as f64)).abs() < 1e-6);
    }

    #[test]
    fn zero_net_loss_is_log_classes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = Net::build(&parse_arch("conv:2:3:1,relu,flatten,linear:7").unwrap(), InputShape::new(1, 4, 4), &mut rng).unwrap();
        net.set_masks(net.masks().iter().map(|m| vec![false; m.len()]).collect()).unwrap();
        let x = Tensor4::from_fn([3, 1, 4, 4], Layout4::Bicmn, |i| i[2] as f32);
        let loss = net.forward(Activation::Spatial(x), &[0, 3, 6], &KernelCtx::default()).unwrap();
        assert!((loss - 7f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn step_needs_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = Net::build(&parse_arch("flatten,linear:2").unwrap(), InputShape::new(1, 2, 2), &mut rng).unwrap();
        assert!(matches!(net.backward_and_step(0.1, 0.0, &KernelCtx::default()), Err(TrainError::MissingForwardCache(_))));
        assert!(Net::new(InputShape::new(1, 2, 2), vec![]).is_err());
    }

    #[test]
    fn one_param_least_squares_step() {
        // softmax over two logits [w·x, 0] with label 0: dL/dw = (p0 − 1)·x
        let kind = LayerKind::Linear { inputs: 1, outputs: 2 };
        let layers = vec![LayerNode::flatten(), LayerNode::weighted(kind, vec![0.5, 0.0], vec![0.0; 2], vec![true, false]).unwrap()];
        let mut net = Net::new(InputShape::new(1, 1, 1), layers).unwrap();
        let ctx = KernelCtx::default();
        let x = Tensor4::from_vec([1, 1, 1, 1], Layout4::Bicmn, vec![2.0]).unwrap();
        net.forward(Activation::Spatial(x), &[0], &ctx).unwrap();
        net.backward_and_step(0.1, 0.0, &ctx).unwrap();
        let p0 = 1.0 / (1.0 + (-1.0f64).exp());
        let want = 0.5 - 0.1 * (p0 - 1.0) * 2.0;
        let w = net.dense_weights()[0].clone();
        assert!((w[0] as f64 - want).abs() < 1e-6);
        assert_eq!(w[1], 0.0);
    }

    #[test]
    fn zero_lr_keeps_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut net = Net::build(&parse_arch("conv:3:3:1,relu,pool,flatten,linear:4").unwrap(), InputShape::new(2, 6, 6), &mut rng).unwrap();
        let before = net.dense_weights();
        let ctx = KernelCtx::default();
        for mode in [DispatchMode::ForceDense, DispatchMode::ForceSparse] {
            net.set_mode(mode);
            let x = Tensor4::from_fn([4, 2, 6, 6], Layout4::Bicmn, |i| (i[0] + i[2] * 3 + i[3]) as f32 * 0.1);
            net.forward(Activation::Spatial(x), &[0, 1, 2, 3], &ctx).unwrap();
            net.backward_and_step(0.0, 0.9, &ctx).unwrap();
            assert_eq!(net.dense_weights(), before);
        }
    }
}
