//! Sparse backpropagation kernels for fully-connected and convolutional
//! layers whose weights carry unstructured sparsity.
//!
//! The sparse kernels ([`linear`], [`conv`]) skip pruned weights entirely in
//! both the forward and the backward pass, and compute weight gradients only
//! at surviving positions. [`reference`] holds naive dense implementations
//! that serve as the correctness oracle; [`dense`] holds GEMM-backed dense
//! baselines for timing comparisons.
//!
//! All math is generic over [`Scalar`]; the `f32` aliases below are what the
//! training harness and benchmarks use.

pub mod conv;
pub mod dense;
pub mod error;
pub mod format;
pub mod geometry;
pub mod kernel;
pub mod lanes;
pub mod linear;
pub mod pruning;
pub mod reference;
pub mod scalar;
pub mod tensor;

pub use conv::{
    default_variant_threshold, select_conv_variant, sparse_conv_backward, sparse_conv_forward, ConvGrads,
    ConvVariant,
};
pub use error::{Error, Result};
pub use format::{scatter_grad_values, CscView, CsrMatrix, SparseConvWeights, SparseGrad, SparseLayout, SparseObject};
pub use geometry::ConvGeometry;
pub use kernel::{KernelCtx, WorkCounter};
pub use lanes::{lane_dot, lane_fmadd_span, LaneSpec};
pub use linear::{sparse_linear_backward, sparse_linear_forward, LinearGrads};
pub use scalar::Scalar;
pub use tensor::{permute4d, transpose2d, DenseMatrix, DenseTensor4, Layout4, MatrixLayout};

pub type Matrix = DenseMatrix<f32>;
pub type Tensor4 = DenseTensor4<f32>;
pub type Csr = CsrMatrix<f32>;
pub type ConvWeights = SparseConvWeights<f32>;
pub type Grads = LinearGrads<f32>;
