//! Flat `key = value` configuration files.
//!
//! ```text
//! # architecture tokens: conv:<oc>:<k>:<pad>, relu, pool, flatten, linear:<n>
//! arch = conv:8:3:1,relu,pool,conv:16:3:1,relu,pool,flatten,linear:10
//! input = 1x12x12
//! classes = 10
//! epochs = 100
//! steps_per_epoch = 100
//! batch_size = 16
//! lr = 0.01
//! momentum = 0.9
//! lr_decay_every = 0          # epochs; 0 keeps the rate constant
//! lr_decay_factor = 0.1
//! seed = 0
//! threads = 1
//! lane_width = 8
//! dispatch = auto             # auto | force-dense | force-sparse
//! mode = gmp                  # gmp | fixed-mask | dense
//! gmp_start = 10
//! gmp_end = 80
//! gmp_step = 10
//! gmp_initial = 0.05
//! gmp_final = 0.95
//! gmp_scope = uniform         # uniform | global
//! gmp_curve = cubic           # cubic | linear
//! model = pretrained/         # bundle directory, fixed-mask mode only
//! data = synthetic            # synthetic | csv:<path>
//! data_samples = 2000
//! data_noise = 0.3
//! eval_samples = 512
//! ```
//!
//! Relative paths resolve against the directory of the config file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sparseprop::pruning::{GmpSchedule, PruneScope, SparsityCurve};

use crate::data::InputShape;
use crate::dispatch::DispatchMode;
use crate::error::{Result, TrainError};
use crate::net::{parse_arch, LayerSpec};

/// Parses `key = value` lines; `#` starts a comment, blank lines are
/// skipped, and repeated keys are an error.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| TrainError::Config(format!("line {}: expected key = value", n + 1)))?;
        let k = k.trim().to_string();
        if k.is_empty() {
            return Err(TrainError::Config(format!("line {}: empty key", n + 1)));
        }
        if out.insert(k.clone(), v.trim().to_string()).is_some() {
            return Err(TrainError::Config(format!("line {}: duplicate key {k:?}", n + 1)));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic { samples: usize, noise: f32 },
    Csv(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainMode {
    /// Plain dense training, no pruning.
    Dense,
    Gmp(GmpSchedule),
    /// Fine-tune a saved sparse model with its masks held fixed; the final
    /// linear layer is reinitialized.
    FixedMask { model: PathBuf },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub arch: Vec<LayerSpec>,
    pub input: InputShape,
    pub classes: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub momentum: f32,
    pub lr_decay_every: usize,
    pub lr_decay_factor: f32,
    pub seed: u64,
    pub threads: usize,
    pub lane_width: usize,
    pub dispatch: DispatchMode,
    pub mode: TrainMode,
    pub data: DataSource,
    pub eval_samples: usize,
}

impl Default for TrainConfig {
    /// Two conv layers and one linear layer on 10-class 12×12 blobs, pruned
    /// to 95% over 100 epochs of 100 steps.
    fn default() -> Self {
        Self {
            arch: parse_arch("conv:8:3:1,relu,pool,conv:16:3:1,relu,pool,flatten,linear:10").expect("valid"),
            input: InputShape::new(1, 12, 12),
            classes: 10,
            epochs: 100,
            steps_per_epoch: 100,
            batch_size: 16,
            lr: 0.01,
            momentum: 0.9,
            lr_decay_every: 0,
            lr_decay_factor: 0.1,
            seed: 0,
            threads: 1,
            lane_width: 8,
            dispatch: DispatchMode::Auto,
            mode: TrainMode::Gmp(GmpSchedule::standard(0.95, PruneScope::Uniform)),
            data: DataSource::Synthetic { samples: 2000, noise: 0.3 },
            eval_samples: 512,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| TrainError::Config(format!("{key} = {v:?} is not a valid number")))
}

impl TrainConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| TrainError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Parses config text; keys not given keep their [`Default`] values.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let kv = parse_kv(text)?;
        let mut c = Self::default();
        let mut gmp = match &c.mode {
            TrainMode::Gmp(s) => *s,
            _ => unreachable!(),
        };
        let mut mode = "gmp".to_string();
        let mut model = None;
        let (mut samples, mut noise) = (2000usize, 0.3f32);
        let mut data = "synthetic".to_string();
        let resolve = |p: &str| {
            let p = PathBuf::from(p);
            if p.is_absolute() { p } else { base.join(p) }
        };
        for (k, v) in &kv {
            let v = v.as_str();
            match k.as_str() {
                "arch" => c.arch = parse_arch(v)?,
                "input" => c.input = InputShape::parse(v)?,
                "classes" => c.classes = num(k, v)?,
                "epochs" => c.epochs = num(k, v)?,
                "steps_per_epoch" => c.steps_per_epoch = num(k, v)?,
                "batch_size" => c.batch_size = num(k, v)?,
                "lr" => c.lr = num(k, v)?,
                "momentum" => c.momentum = num(k, v)?,
                "lr_decay_every" => c.lr_decay_every = num(k, v)?,
                "lr_decay_factor" => c.lr_decay_factor = num(k, v)?,
                "seed" => c.seed = num(k, v)?,
                "threads" => c.threads = num(k, v)?,
                "lane_width" => c.lane_width = num(k, v)?,
                "dispatch" => c.dispatch = v.parse()?,
                "mode" => mode = v.to_string(),
                "gmp_start" => gmp.start_epoch = num(k, v)?,
                "gmp_end" => gmp.end_epoch = num(k, v)?,
                "gmp_step" => gmp.step = num(k, v)?,
                "gmp_initial" => gmp.initial_sparsity = num(k, v)?,
                "gmp_final" => gmp.final_sparsity = num(k, v)?,
                "gmp_scope" => {
                    gmp.scope = match v {
                        "uniform" => PruneScope::Uniform,
                        "global" => PruneScope::Global,
                        _ => return Err(TrainError::Config(format!("unknown gmp_scope {v:?}"))),
                    }
                }
                "gmp_curve" => {
                    gmp.curve = match v {
                        "cubic" => SparsityCurve::Cubic,
                        "linear" => SparsityCurve::Linear,
                        _ => return Err(TrainError::Config(format!("unknown gmp_curve {v:?}"))),
                    }
                }
                "model" => model = Some(resolve(v)),
                "data" => data = v.to_string(),
                "data_samples" => samples = num(k, v)?,
                "data_noise" => noise = num(k, v)?,
                "eval_samples" => c.eval_samples = num(k, v)?,
                _ => return Err(TrainError::Config(format!("unknown key {k:?}"))),
            }
        }
        gmp.finetune_epochs = c.epochs.saturating_sub(gmp.end_epoch);
        c.mode = match mode.as_str() {
            "gmp" => TrainMode::Gmp(gmp),
            "dense" => TrainMode::Dense,
            "fixed-mask" => TrainMode::FixedMask {
                model: model.ok_or_else(|| TrainError::Config("fixed-mask mode needs model = <bundle dir>".into()))?,
            },
            _ => return Err(TrainError::Config(format!("unknown mode {mode:?}"))),
        };
        c.data = match data.as_str() {
            "synthetic" => DataSource::Synthetic { samples, noise },
            d => match d.strip_prefix("csv:") {
                Some(p) => DataSource::Csv(resolve(p.trim())),
                None => return Err(TrainError::Config(format!("unknown data source {d:?}"))),
            },
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.batch_size == 0 || self.steps_per_epoch == 0 || self.classes == 0 {
            return bad("batch_size, steps_per_epoch and classes must be positive".into());
        }
        if self.threads == 0 {
            return bad("threads must be positive".into());
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("lr {} / momentum {} out of range", self.lr, self.momentum));
        }
        if let TrainMode::Gmp(s) = &self.mode {
            s.validate()?;
        }
        Ok(())
    }

    /// The schedule with its fine-tuning length matched to `epochs`.
    pub fn schedule(&self) -> Option<GmpSchedule> {
        match &self.mode {
            TrainMode::Gmp(s) => Some(GmpSchedule { finetune_epochs: self.epochs.saturating_sub(s.end_epoch), ..*s }),
            _ => None,
        }
    }

    /// Learning rate in effect during `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f32 {
        match self.lr_decay_every {
            0 => self.lr,
            every => self.lr * self.lr_decay_factor.powi((epoch / every) as i32),
        }
    }
}
