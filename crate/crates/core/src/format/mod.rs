//! Sparse weight representations and their on-disk container.

mod codec;
mod conv;
mod csr;
mod grad;

pub use codec::{deserialize, serialize, SparseObject, FORMAT_VERSION, KIND_CONV, KIND_CSR, MAGIC};
pub use conv::SparseConvWeights;
pub use csr::{CscView, CsrMatrix};
pub use grad::{scatter_grad_values, SparseGrad, SparseLayout};
