//! A small sequential trainer that runs the sparse kernels end to end.
//!
//! Weighted layers keep one set of masked weights that can be executed
//! either densely or through the sparse kernels; a per-layer dispatcher
//! picks the faster one from a one-batch timing probe. Training is SGD with
//! momentum under an optional gradual-magnitude-pruning schedule, or
//! fine-tuning of a saved sparse model with its masks fixed.

pub mod bundle;
pub mod config;
pub mod data;
pub mod dispatch;
pub mod error;
pub mod layer;
pub mod net;
pub mod trainer;

pub use bundle::{load_bundle, load_pretrained_sparse, save_bundle};
pub use config::{DataSource, TrainConfig, TrainMode};
pub use data::{BatchSampler, BlobSpec, Dataset, InputShape};
pub use dispatch::{
    dispatch_layer, DispatchDecision, DispatchMode, ImplChoice, ProbeTimer, ProbeTiming, WallClock,
    SPARSITY_THRESHOLD,
};
pub use error::{Result, TrainError};
pub use layer::{Activation, LayerKind, LayerNode};
pub use net::{parse_arch, softmax_cross_entropy, LayerSpec, Net};
pub use trainer::{build_net, evaluate, kernel_ctx, load_data, train, train_gmp, EpochRecord, RunReport};
