//! Model bundles: a directory holding `manifest.txt` (`key = value`, same
//! syntax as the config) and one `.sprp` file per weighted layer.
//!
//! ```text
//! format = sparseprop-bundle
//! version = 1
//! input = 1x12x12
//! layers = 3
//! layer.0.kind = flatten
//! layer.1.kind = linear:10
//! layer.1.weights = layer_1.sprp
//! layer.1.bias = 0.01,-0.2,...
//! layer.2.kind = relu
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use sparseprop::format::{deserialize, serialize, SparseObject};
use sparseprop::{ConvWeights, Csr, Layout4, Matrix, Tensor4};

use crate::config::parse_kv;
use crate::data::InputShape;
use crate::error::{Result, TrainError};
use crate::layer::{LayerKind, LayerNode};
use crate::net::{resolve_arch, LayerSpec, Net};

const MANIFEST: &str = "manifest.txt";
const FORMAT: &str = "sparseprop-bundle";
const VERSION: u32 = 1;

/// Writes every layer, its mask and bias; momentum is not saved.
pub fn save_bundle(net: &Net, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut m = format!("format = {FORMAT}\nversion = {VERSION}\ninput = {}\nlayers = {}\n", net.input(), net.layers().len());
    for (i, layer) in net.layers().iter().enumerate() {
        let kind = layer.kind();
        m += &format!("layer.{i}.kind = {}\n", kind.token());
        if let (Some(w), Some(mask), Some(bias)) = (layer.dense_weights(), layer.mask(), layer.bias()) {
            let obj: SparseObject = match kind {
                LayerKind::Linear { inputs, outputs } => {
                    Csr::from_dense_masked(&Matrix::from_vec(inputs, outputs, w)?, mask)?.into()
                }
                LayerKind::Conv2d { in_channels, out_channels, kernel, .. } => ConvWeights::from_dense_masked(
                    &Tensor4::from_vec([out_channels, in_channels, kernel, kernel], Layout4::Bicmn, w)?,
                    mask,
                )?
                .into(),
                _ => unreachable!("only weighted layers carry masks"),
            };
            let file = format!("layer_{i}.sprp");
            std::fs::write(dir.join(&file), serialize(&obj)?)?;
            let bias: Vec<String> = bias.iter().map(f32::to_string).collect();
            m += &format!("layer.{i}.weights = {file}\nlayer.{i}.bias = {}\n", bias.join(","));
        }
    }
    std::fs::write(dir.join(MANIFEST), m)?;
    Ok(())
}

/// Loads a bundle exactly as saved.
pub fn load_bundle(dir: &Path) -> Result<Net> {
    let err = |msg: String| TrainError::Bundle { path: dir.to_path_buf(), msg };
    let text = std::fs::read_to_string(dir.join(MANIFEST)).map_err(|e| err(format!("{MANIFEST}: {e}")))?;
    let kv = parse_kv(&text)?;
    let get = |k: &str| kv.get(k).map(String::as_str).ok_or_else(|| err(format!("manifest lacks {k:?}")));
    if get("format")? != FORMAT {
        return Err(err("not a sparseprop bundle".into()));
    }
    if get("version")? != VERSION.to_string() {
        return Err(err(format!("unsupported bundle version {}", get("version")?)));
    }
    let input = InputShape::parse(get("input")?)?;
    let count: usize = get("layers")?.parse().map_err(|_| err("layer count is not a number".into()))?;
    if count == 0 {
        return Err(err("bundle holds no layers".into()));
    }
    let specs: Vec<LayerSpec> = (0..count).map(|i| get(&format!("layer.{i}.kind"))?.parse()).collect::<Result<_>>()?;
    let kinds = resolve_arch(&specs, input)?;
    let layers = kinds
        .into_iter()
        .enumerate()
        .map(|(i, kind)| match kind {
            LayerKind::Relu => Ok(LayerNode::relu()),
            LayerKind::MaxPool2x2 => Ok(LayerNode::max_pool()),
            LayerKind::Flatten => Ok(LayerNode::flatten()),
            kind => load_weighted(dir, &kv, i, kind),
        })
        .collect::<Result<_>>()?;
    Net::new(input, layers)
}

fn load_weighted(dir: &Path, kv: &BTreeMap<String, String>, i: usize, kind: LayerKind) -> Result<LayerNode> {
    let err = |msg: String| TrainError::Bundle { path: dir.to_path_buf(), msg: format!("layer {i}: {msg}") };
    let file = kv.get(&format!("layer.{i}.weights")).ok_or_else(|| err("no weights file".into()))?;
    let bias: Vec<f32> = kv
        .get(&format!("layer.{i}.bias"))
        .ok_or_else(|| err("no bias".into()))?
        .split(',')
        .map(|v| v.trim().parse::<f32>())
        .collect::<Result<_, _>>()
        .map_err(|e| err(format!("bias: {e}")))?;
    let bytes = std::fs::read(dir.join(file)).map_err(|e| err(format!("{file}: {e}")))?;
    let (weights, mask) = match (deserialize(&bytes)?, kind) {
        (SparseObject::Csr(w), LayerKind::Linear { inputs, outputs }) if w.n_rows() == inputs && w.n_cols() == outputs => {
            (w.to_dense()?.into_vec(), w.mask())
        }
        (SparseObject::Conv(w), LayerKind::Conv2d { in_channels, out_channels, kernel, .. })
            if w.out_channels() == out_channels
                && w.in_channels() == in_channels
                && w.kernel_h() == kernel
                && w.kernel_w() == kernel =>
        {
            (w.to_dense()?.into_vec(), w.mask())
        }
        _ => return Err(err(format!("{file} does not match {}", kind.token()))),
    };
    LayerNode::weighted(kind, weights, bias, mask)
}

/// Sparse-transfer entry point: loads a bundle, keeps every mask, and
/// replaces the final linear layer with a fresh dense one of `classes`
/// outputs.
pub fn load_pretrained_sparse(dir: &Path, classes: usize, rng: &mut impl Rng) -> Result<Net> {
    let mut net = load_bundle(dir)?;
    net.reinit_head(classes, rng)?;
    Ok(net)
}
