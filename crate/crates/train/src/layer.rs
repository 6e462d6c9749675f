//! Layer nodes. Weighted layers hold either a dense or a sparse
//! parameterization of the same masked weights and can switch between them
//! without changing any value.

use rand::Rng;
use sparseprop::dense::{
    dense_conv_backward_im2col, dense_conv_forward_im2col, dense_linear_backward_t, dense_linear_forward_t,
};
use sparseprop::{
    permute4d, scatter_grad_values, sparse_conv_backward, sparse_conv_forward, sparse_linear_backward,
    sparse_linear_forward, transpose2d, ConvGeometry, ConvVariant, ConvWeights, Csr, KernelCtx, Layout4, Matrix,
    SparseLayout, Tensor4,
};

use crate::dispatch::{DispatchDecision, ImplChoice};
use crate::error::{shape, Result, TrainError};

/// Flat activations are stored transposed (`features × batch`); spatial ones
/// as `(B, C, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub enum Activation {
    Flat(Matrix),
    Spatial(Tensor4),
}

impl Activation {
    pub fn batch(&self) -> usize {
        match self {
            Activation::Flat(m) => m.cols(),
            Activation::Spatial(t) => t.logical_dims()[0],
        }
    }

    pub fn values(&self) -> &[f32] {
        match self {
            Activation::Flat(m) => m.data(),
            Activation::Spatial(t) => t.data(),
        }
    }

    fn values_mut(&mut self) -> &mut [f32] {
        match self {
            Activation::Flat(m) => m.data_mut(),
            Activation::Spatial(t) => t.data_mut(),
        }
    }

    pub fn describe(&self) -> String {
        match self {
            Activation::Flat(m) => format!("flat {}x{}", m.rows(), m.cols()),
            Activation::Spatial(t) => format!("spatial {:?}", t.logical_dims()),
        }
    }

    fn ones_like(&self) -> Activation {
        let mut a = self.clone();
        a.values_mut().fill(1.0);
        a
    }

    fn flat(self, layer: usize) -> Result<Matrix> {
        match self {
            Activation::Flat(m) => Ok(m),
            other => Err(shape(layer, format!("expected flat input, got {}", other.describe()))),
        }
    }

    fn spatial(self, layer: usize) -> Result<Tensor4> {
        match self {
            Activation::Spatial(t) => Ok(t),
            other => Err(shape(layer, format!("expected spatial input, got {}", other.describe()))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    /// Weights are `inputs × outputs`.
    Linear { inputs: usize, outputs: usize },
    /// Weights are `(OC, IC, K, K)`, stride 1.
    Conv2d { in_channels: usize, out_channels: usize, kernel: usize, pad: usize },
    Relu,
    MaxPool2x2,
    Flatten,
}

impl LayerKind {
    pub fn is_weighted(&self) -> bool {
        matches!(self, LayerKind::Linear { .. } | LayerKind::Conv2d { .. })
    }

    pub fn weight_len(&self) -> usize {
        match *self {
            LayerKind::Linear { inputs, outputs } => inputs * outputs,
            LayerKind::Conv2d { in_channels, out_channels, kernel, .. } => out_channels * in_channels * kernel * kernel,
            _ => 0,
        }
    }

    pub fn bias_len(&self) -> usize {
        match *self {
            LayerKind::Linear { outputs, .. } => outputs,
            LayerKind::Conv2d { out_channels, .. } => out_channels,
            _ => 0,
        }
    }

    pub fn fan_in(&self) -> usize {
        match *self {
            LayerKind::Linear { inputs, .. } => inputs,
            LayerKind::Conv2d { in_channels, kernel, .. } => in_channels * kernel * kernel,
            _ => 0,
        }
    }

    /// The token used in architecture strings and bundle manifests.
    pub fn token(&self) -> String {
        match *self {
            LayerKind::Linear { outputs, .. } => format!("linear:{outputs}"),
            LayerKind::Conv2d { out_channels, kernel, pad, .. } => format!("conv:{out_channels}:{kernel}:{pad}"),
            LayerKind::Relu => "relu".into(),
            LayerKind::MaxPool2x2 => "pool".into(),
            LayerKind::Flatten => "flatten".into(),
        }
    }
}

#[derive(Debug, Clone)]
enum WeightStore {
    DenseLinear(Matrix),
    DenseConv(Tensor4),
    SparseLinear(Csr),
    SparseConv(ConvWeights, ConvVariant),
}

#[derive(Debug, Clone, Copy)]
enum WeightRef<'a> {
    DenseLinear(&'a Matrix),
    DenseConv(&'a Tensor4),
    SparseLinear(&'a Csr),
    SparseConv(&'a ConvWeights, ConvVariant),
}

impl WeightStore {
    fn as_ref(&self) -> WeightRef<'_> {
        match self {
            WeightStore::DenseLinear(w) => WeightRef::DenseLinear(w),
            WeightStore::DenseConv(w) => WeightRef::DenseConv(w),
            WeightStore::SparseLinear(w) => WeightRef::SparseLinear(w),
            WeightStore::SparseConv(w, v) => WeightRef::SparseConv(w, *v),
        }
    }

    fn choice(&self) -> ImplChoice {
        match self {
            WeightStore::DenseLinear(_) | WeightStore::DenseConv(_) => ImplChoice::Dense,
            WeightStore::SparseLinear(_) => ImplChoice::SparseLinear,
            WeightStore::SparseConv(_, v) => ImplChoice::from_variant(*v),
        }
    }
}

/// Dense weights (pruned entries held at zero) next to the matching sparse
/// parameterization, for probing.
pub(crate) struct Prepared {
    dense: WeightStore,
    sparse: WeightStore,
}

impl Prepared {
    fn get(&self, choice: ImplChoice) -> WeightRef<'_> {
        match (choice, &self.sparse) {
            (ImplChoice::Dense, _) => self.dense.as_ref(),
            (ImplChoice::SparseBatchLast, WeightStore::SparseConv(w, _)) => {
                WeightRef::SparseConv(w, ConvVariant::BatchLast)
            }
            (ImplChoice::SparseOverOn, WeightStore::SparseConv(w, _)) => WeightRef::SparseConv(w, ConvVariant::OverOn),
            _ => self.sparse.as_ref(),
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct WeightParams {
    store: WeightStore,
    /// Momentum buffer, aligned with the stored values.
    vel: Vec<f32>,
    mask: Vec<bool>,
    bias: Vec<f32>,
    bias_vel: Vec<f32>,
    decision: Option<DispatchDecision>,
}

#[derive(Debug, Clone)]
enum Cache {
    Linear { xt: Matrix },
    Conv { x: Tensor4, geo: ConvGeometry },
    Relu { active: Vec<bool> },
    Pool { in_dims: [usize; 4], argmax: Vec<usize> },
    Flatten { dims: [usize; 4] },
}

#[derive(Debug, Clone)]
pub struct LayerNode {
    kind: LayerKind,
    params: Option<WeightParams>,
    cache: Option<Cache>,
}

fn gather(values: &[f32], mask: &[bool]) -> Vec<f32> {
    values.iter().zip(mask).filter(|(_, &k)| k).map(|(&v, _)| v).collect()
}

impl LayerNode {
    pub fn relu() -> Self {
        Self { kind: LayerKind::Relu, params: None, cache: None }
    }

    pub fn max_pool() -> Self {
        Self { kind: LayerKind::MaxPool2x2, params: None, cache: None }
    }

    pub fn flatten() -> Self {
        Self { kind: LayerKind::Flatten, params: None, cache: None }
    }

    /// A weighted layer with uniform `±1/√fan_in` weights and zero bias.
    pub fn init_weighted(kind: LayerKind, rng: &mut impl Rng) -> Result<Self> {
        let bound = 1.0 / (kind.fan_in().max(1) as f32).sqrt();
        let w = (0..kind.weight_len()).map(|_| rng.random_range(-bound..=bound)).collect();
        Self::weighted(kind, w, vec![0.0; kind.bias_len()], vec![true; kind.weight_len()])
    }

    /// A weighted layer from flat dense weights, bias and mask; masked-out
    /// weights are zeroed.
    pub fn weighted(kind: LayerKind, mut weights: Vec<f32>, bias: Vec<f32>, mask: Vec<bool>) -> Result<Self> {
        if !kind.is_weighted() {
            return Err(TrainError::Config(format!("{} has no weights", kind.token())));
        }
        let n = kind.weight_len();
        if weights.len() != n || mask.len() != n || bias.len() != kind.bias_len() {
            return Err(TrainError::Config(format!(
                "{}: expected {n} weights/mask entries and {} biases",
                kind.token(),
                kind.bias_len()
            )));
        }
        for (w, &k) in weights.iter_mut().zip(&mask) {
            if !k {
                *w = 0.0;
            }
        }
        let store = dense_store(kind, weights)?;
        Ok(Self {
            kind,
            params: Some(WeightParams {
                store,
                vel: vec![0.0; n],
                mask,
                bias_vel: vec![0.0; bias.len()],
                bias,
                decision: None,
            }),
            cache: None,
        })
    }

    pub fn kind(&self) -> LayerKind {
        self.kind
    }

    pub fn is_weighted(&self) -> bool {
        self.params.is_some()
    }

    fn params(&self) -> Option<&WeightParams> {
        self.params.as_ref()
    }

    /// Current weights in dense flat order, pruned entries as zero.
    pub fn dense_weights(&self) -> Option<Vec<f32>> {
        let p = self.params()?;
        Some(match &p.store {
            WeightStore::DenseLinear(w) => w.data().to_vec(),
            WeightStore::DenseConv(w) => w.data().to_vec(),
            WeightStore::SparseLinear(w) => w.densify_with(w.vals()).into_vec(),
            WeightStore::SparseConv(w, _) => w.densify_with(w.vals()).into_vec(),
        })
    }

    pub fn bias(&self) -> Option<&[f32]> {
        self.params().map(|p| p.bias.as_slice())
    }

    pub fn mask(&self) -> Option<&[bool]> {
        self.params().map(|p| p.mask.as_slice())
    }

    pub fn mask_sparsity(&self) -> f64 {
        match self.params() {
            Some(p) if !p.mask.is_empty() => p.mask.iter().filter(|&&k| !k).count() as f64 / p.mask.len() as f64,
            _ => 0.0,
        }
    }

    pub fn current_impl(&self) -> Option<ImplChoice> {
        self.params().map(|p| p.store.choice())
    }

    pub fn decision(&self) -> Option<&DispatchDecision> {
        self.params().and_then(|p| p.decision.as_ref())
    }

    /// Replaces the mask, zeroes the newly pruned weights and their momentum,
    /// and drops the cached dispatch decision if the mask changed.
    pub fn set_mask(&mut self, mask: Vec<bool>) -> Result<()> {
        let kind = self.kind;
        let p = self.params.as_mut().ok_or_else(|| TrainError::Config(format!("{} has no mask", kind.token())))?;
        if mask.len() != p.mask.len() {
            return Err(sparseprop::Error::LengthMismatch { expected: p.mask.len(), found: mask.len() }.into());
        }
        if mask == p.mask {
            return Ok(());
        }
        to_dense(kind, p)?;
        p.mask = mask;
        let WeightParams { store, vel, mask, .. } = p;
        let w = match store {
            WeightStore::DenseLinear(w) => w.data_mut(),
            WeightStore::DenseConv(w) => w.data_mut(),
            _ => unreachable!("converted to dense above"),
        };
        sparseprop::pruning::apply_mask(w, mask)?;
        sparseprop::pruning::apply_mask(vel, mask)?;
        p.decision = None;
        Ok(())
    }

    pub(crate) fn clear_decision(&mut self) {
        if let Some(p) = self.params.as_mut() {
            p.decision = None;
        }
    }

    /// Switches the parameterization and records the decision that chose it.
    pub(crate) fn apply_decision(&mut self, decision: DispatchDecision) -> Result<()> {
        let kind = self.kind;
        let p = self.params.as_mut().ok_or_else(|| TrainError::Config("decision for an unweighted layer".into()))?;
        switch_impl(kind, p, decision.chosen)?;
        p.decision = Some(decision);
        Ok(())
    }

    pub(crate) fn prepare_probe(&self) -> Result<Prepared> {
        let p = self.params().ok_or_else(|| TrainError::Config("probe on an unweighted layer".into()))?;
        let dense = dense_store(self.kind, self.dense_weights().expect("weighted"))?;
        let sparse = match &dense {
            WeightStore::DenseLinear(w) => WeightStore::SparseLinear(Csr::from_dense_masked(w, &p.mask)?),
            WeightStore::DenseConv(w) => {
                WeightStore::SparseConv(ConvWeights::from_dense_masked(w, &p.mask)?, ConvVariant::OverOn)
            }
            _ => unreachable!(),
        };
        Ok(Prepared { dense, sparse })
    }

    /// One forward and backward pass under `choice` on `x`; results are
    /// discarded.
    pub(crate) fn probe(&self, id: usize, prepared: &Prepared, choice: ImplChoice, x: &Activation, ctx: &KernelCtx) -> Result<()> {
        let w = prepared.get(choice);
        let bias = &self.params().expect("weighted").bias;
        let (out, cache) = weighted_forward(id, self.kind, w, bias, x.clone(), ctx)?;
        weighted_backward(id, w, &cache, out.ones_like(), ctx)?;
        Ok(())
    }

    /// Geometry of this conv layer for a given input, if it is one.
    pub fn conv_geometry(&self, x: &Activation) -> Option<ConvGeometry> {
        match (self.kind, x) {
            (LayerKind::Conv2d { in_channels, out_channels, kernel, pad }, Activation::Spatial(t)) => {
                let [b, _, m, n] = t.logical_dims();
                ConvGeometry::new(b, in_channels, out_channels, m, n, kernel, pad).ok()
            }
            _ => None,
        }
    }

    pub fn forward(&mut self, id: usize, x: Activation, ctx: &KernelCtx) -> Result<Activation> {
        let (out, cache) = match self.kind {
            LayerKind::Linear { .. } | LayerKind::Conv2d { .. } => {
                let p = self.params.as_ref().expect("weighted layer has params");
                weighted_forward(id, self.kind, p.store.as_ref(), &p.bias, x, ctx)?
            }
            LayerKind::Relu => {
                let mut x = x;
                let active: Vec<bool> = x.values().iter().map(|&v| v > 0.0).collect();
                for v in x.values_mut() {
                    *v = v.max(0.0);
                }
                (x, Cache::Relu { active })
            }
            LayerKind::MaxPool2x2 => {
                let t = x.spatial(id)?;
                let [b, c, h, w] = t.logical_dims();
                if h < 2 || w < 2 {
                    return Err(shape(id, format!("cannot pool {h}x{w}")));
                }
                let (oh, ow) = (h / 2, w / 2);
                let mut out = Vec::with_capacity(b * c * oh * ow);
                let mut argmax = Vec::with_capacity(out.capacity());
                let d = t.data();
                for plane in 0..b * c {
                    let base = plane * h * w;
                    for i in 0..oh {
                        for j in 0..ow {
                            let cands = [
                                base + 2 * i * w + 2 * j,
                                base + 2 * i * w + 2 * j + 1,
                                base + (2 * i + 1) * w + 2 * j,
                                base + (2 * i + 1) * w + 2 * j + 1,
                            ];
                            let best = cands.into_iter().fold(cands[0], |a, k| if d[k] > d[a] { k } else { a });
                            out.push(d[best]);
                            argmax.push(best);
                        }
                    }
                }
                let t = Tensor4::from_vec([b, c, oh, ow], Layout4::Bicmn, out)?;
                (Activation::Spatial(t), Cache::Pool { in_dims: [b, c, h, w], argmax })
            }
            LayerKind::Flatten => {
                let t = x.spatial(id)?;
                let dims = t.logical_dims();
                let f = dims[1] * dims[2] * dims[3];
                let xt = transpose2d(&Matrix::from_vec(dims[0], f, t.into_vec())?);
                (Activation::Flat(xt), Cache::Flatten { dims })
            }
        };
        self.cache = Some(cache);
        Ok(out)
    }

    /// Propagates `grad` to this layer's input and applies one SGD step with
    /// momentum (`v ← μv + g`, `w ← w − lr·v`). Sparse layers update only
    /// their stored values, so the mask cannot change.
    pub fn backward_and_step(&mut self, id: usize, grad: Activation, lr: f32, momentum: f32, ctx: &KernelCtx) -> Result<Activation> {
        let cache = self.cache.take().ok_or(TrainError::MissingForwardCache(id))?;
        match cache {
            Cache::Relu { active } => {
                let mut g = grad;
                if g.values().len() != active.len() {
                    return Err(shape(id, "relu gradient length differs from the forward pass"));
                }
                for (v, &a) in g.values_mut().iter_mut().zip(&active) {
                    if !a {
                        *v = 0.0;
                    }
                }
                Ok(g)
            }
            Cache::Pool { in_dims, argmax } => {
                let g = grad.spatial(id)?;
                if g.len() != argmax.len() {
                    return Err(shape(id, "pool gradient length differs from the forward pass"));
                }
                let mut dx = Tensor4::zeros(in_dims, Layout4::Bicmn);
                for (&k, &v) in argmax.iter().zip(g.data()) {
                    dx.data_mut()[k] += v;
                }
                Ok(Activation::Spatial(dx))
            }
            Cache::Flatten { dims } => {
                let g = grad.flat(id)?;
                let gx = transpose2d(&g);
                Ok(Activation::Spatial(Tensor4::from_vec(dims, Layout4::Bicmn, gx.into_vec())?))
            }
            cache @ (Cache::Linear { .. } | Cache::Conv { .. }) => {
                let p = self.params.as_mut().expect("weighted layer has params");
                let (dx, dw, db) = weighted_backward(id, p.store.as_ref(), &cache, grad, ctx)?;
                sgd(&mut p.bias, &mut p.bias_vel, &db, lr, momentum);
                match &mut p.store {
                    WeightStore::DenseLinear(w) => {
                        sgd(w.data_mut(), &mut p.vel, &dw, lr, momentum);
                        sparseprop::pruning::apply_mask(w.data_mut(), &p.mask)?;
                        sparseprop::pruning::apply_mask(&mut p.vel, &p.mask)?;
                    }
                    WeightStore::DenseConv(w) => {
                        sgd(w.data_mut(), &mut p.vel, &dw, lr, momentum);
                        sparseprop::pruning::apply_mask(w.data_mut(), &p.mask)?;
                        sparseprop::pruning::apply_mask(&mut p.vel, &p.mask)?;
                    }
                    WeightStore::SparseLinear(w) => {
                        let g = scatter_grad_values(&*w, dw)?.into_vals();
                        sgd(w.vals_mut(), &mut p.vel, &g, lr, momentum);
                    }
                    WeightStore::SparseConv(w, _) => {
                        let g = scatter_grad_values(&*w, dw)?.into_vals();
                        sgd(w.vals_mut(), &mut p.vel, &g, lr, momentum);
                    }
                }
                Ok(dx)
            }
        }
    }

    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }

    /// Restores a cache-free copy, used when serializing and in tests.
    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

fn sgd(w: &mut [f32], vel: &mut [f32], g: &[f32], lr: f32, momentum: f32) {
    debug_assert!(w.len() == vel.len() && w.len() == g.len());
    for ((w, v), &g) in w.iter_mut().zip(vel.iter_mut()).zip(g) {
        *v = momentum * *v + g;
        *w -= lr * *v;
    }
}

fn dense_store(kind: LayerKind, weights: Vec<f32>) -> Result<WeightStore> {
    Ok(match kind {
        LayerKind::Linear { inputs, outputs } => WeightStore::DenseLinear(Matrix::from_vec(inputs, outputs, weights)?),
        LayerKind::Conv2d { in_channels, out_channels, kernel, .. } => WeightStore::DenseConv(Tensor4::from_vec(
            [out_channels, in_channels, kernel, kernel],
            Layout4::Bicmn,
            weights,
        )?),
        _ => unreachable!("only weighted kinds have stores"),
    })
}

fn to_dense(kind: LayerKind, p: &mut WeightParams) -> Result<()> {
    let (w, vel) = match &p.store {
        WeightStore::DenseLinear(_) | WeightStore::DenseConv(_) => return Ok(()),
        WeightStore::SparseLinear(w) => (w.densify_with(w.vals()).into_vec(), w.densify_with(&p.vel).into_vec()),
        WeightStore::SparseConv(w, _) => (w.densify_with(w.vals()).into_vec(), w.densify_with(&p.vel).into_vec()),
    };
    p.store = dense_store(kind, w)?;
    p.vel = vel;
    Ok(())
}

/// Stored values of both sparse formats follow dense flat order restricted
/// to the mask, so momentum converts by gathering.
fn switch_impl(kind: LayerKind, p: &mut WeightParams, choice: ImplChoice) -> Result<()> {
    if p.store.choice() == choice {
        return Ok(());
    }
    to_dense(kind, p)?;
    let store = match (&p.store, choice) {
        (_, ImplChoice::Dense) => return Ok(()),
        (WeightStore::DenseLinear(w), ImplChoice::SparseLinear) => WeightStore::SparseLinear(Csr::from_dense_masked(w, &p.mask)?),
        (WeightStore::DenseConv(w), ImplChoice::SparseBatchLast | ImplChoice::SparseOverOn) => WeightStore::SparseConv(
            ConvWeights::from_dense_masked(w, &p.mask)?,
            choice.conv_variant().expect("conv choice"),
        ),
        _ => return Err(TrainError::Config(format!("{} cannot run as {}", kind.token(), choice.name()))),
    };
    p.vel = gather(&p.vel, &p.mask);
    p.store = store;
    Ok(())
}

fn add_bias_rows(out: &mut Matrix, bias: &[f32]) {
    let b = out.cols();
    for (row, &bv) in out.data_mut().chunks_exact_mut(b.max(1)).zip(bias) {
        row.iter_mut().for_each(|v| *v += bv);
    }
}

fn add_bias_planes(out: &mut Tensor4, bias: &[f32]) {
    let [_, oc, om, on] = out.logical_dims();
    let plane = om * on;
    for (i, chunk) in out.data_mut().chunks_exact_mut(plane.max(1)).enumerate() {
        let bv = bias[i % oc];
        chunk.iter_mut().for_each(|v| *v += bv);
    }
}

fn weighted_forward(
    id: usize,
    kind: LayerKind,
    w: WeightRef<'_>,
    bias: &[f32],
    x: Activation,
    ctx: &KernelCtx,
) -> Result<(Activation, Cache)> {
    match kind {
        LayerKind::Linear { inputs, .. } => {
            let xt = x.flat(id)?;
            if xt.rows() != inputs {
                return Err(shape(id, format!("linear expects {inputs} features, got {}", xt.rows())));
            }
            let mut out = match w {
                WeightRef::DenseLinear(w) => dense_linear_forward_t(&xt, w, ctx)?,
                WeightRef::SparseLinear(w) => sparse_linear_forward(&xt, w, ctx)?,
                _ => unreachable!("linear layers hold linear weights"),
            };
            add_bias_rows(&mut out, bias);
            Ok((Activation::Flat(out), Cache::Linear { xt }))
        }
        LayerKind::Conv2d { in_channels, out_channels, kernel, pad } => {
            let x = x.spatial(id)?;
            let [b, ic, m, n] = x.logical_dims();
            if ic != in_channels {
                return Err(shape(id, format!("conv expects {in_channels} channels, got {ic}")));
            }
            let geo = ConvGeometry::new(b, ic, out_channels, m, n, kernel, pad).map_err(|e| shape(id, e.to_string()))?;
            let (mut out, x) = match w {
                WeightRef::DenseConv(w) => (dense_conv_forward_im2col(&x, w, &geo, ctx)?, x),
                WeightRef::SparseConv(w, ConvVariant::OverOn) => {
                    (sparse_conv_forward(&x, w, &geo, ConvVariant::OverOn, ctx)?, x)
                }
                WeightRef::SparseConv(w, ConvVariant::BatchLast) => {
                    let xp = permute4d(&x, Layout4::Icmnb)?;
                    let o = sparse_conv_forward(&xp, w, &geo, ConvVariant::BatchLast, ctx)?;
                    (permute4d(&o, Layout4::Bicmn)?, xp)
                }
                _ => unreachable!("conv layers hold conv weights"),
            };
            add_bias_planes(&mut out, bias);
            Ok((Activation::Spatial(out), Cache::Conv { x, geo }))
        }
        _ => unreachable!("only weighted kinds"),
    }
}

/// Returns `(dX, dW, d_bias)`; `dW` is dense flat for dense weights and
/// per stored value for sparse ones.
fn weighted_backward(
    id: usize,
    w: WeightRef<'_>,
    cache: &Cache,
    grad: Activation,
    ctx: &KernelCtx,
) -> Result<(Activation, Vec<f32>, Vec<f32>)> {
    match cache {
        Cache::Linear { xt } => {
            let dot = grad.flat(id)?;
            let db = dot.data().chunks_exact(dot.cols().max(1)).map(|r| r.iter().sum()).collect();
            let (dxt, dw) = match w {
                WeightRef::DenseLinear(w) => {
                    let (dxt, dw) = dense_linear_backward_t(xt, w, &dot, ctx)?;
                    (dxt, dw.into_vec())
                }
                WeightRef::SparseLinear(w) => {
                    let g = sparse_linear_backward(xt, w, &dot, ctx)?;
                    (g.dxt, g.dw_vals)
                }
                _ => unreachable!(),
            };
            Ok((Activation::Flat(dxt), dw, db))
        }
        Cache::Conv { x, geo } => {
            let d_out = grad.spatial(id)?;
            if d_out.logical_dims() != geo.output_dims() {
                return Err(shape(id, format!("conv gradient {:?} vs output {:?}", d_out.logical_dims(), geo.output_dims())));
            }
            let plane = geo.om() * geo.on();
            let mut db = vec![0.0f32; geo.oc];
            for (i, chunk) in d_out.data().chunks_exact(plane.max(1)).enumerate() {
                db[i % geo.oc] += chunk.iter().sum::<f32>();
            }
            let (dx, dw) = match w {
                WeightRef::DenseConv(w) => {
                    let (dx, dw) = dense_conv_backward_im2col(x, w, &d_out, geo, ctx)?;
                    (dx, dw.into_vec())
                }
                WeightRef::SparseConv(w, ConvVariant::OverOn) => {
                    let g = sparse_conv_backward(x, w, &d_out, geo, ConvVariant::OverOn, ctx)?;
                    (g.dx, g.dw_vals)
                }
                WeightRef::SparseConv(w, ConvVariant::BatchLast) => {
                    let dp = permute4d(&d_out, Layout4::Icmnb)?;
                    let g = sparse_conv_backward(x, w, &dp, geo, ConvVariant::BatchLast, ctx)?;
                    (permute4d(&g.dx, Layout4::Bicmn)?, g.dw_vals)
                }
                _ => unreachable!(),
            };
            Ok((Activation::Spatial(dx), dw, db))
        }
        _ => unreachable!("weighted caches only"),
    }
}
