//! Naive dense forward/backward math used as the correctness oracle for the
//! sparse kernels, plus a central-difference gradient estimator.
//!
//! Nothing here is blocked or vectorized. Every function works for any
//! [`Scalar`](crate::Scalar), so checks can run the oracle in `f64`.

mod conv;
mod fd;
mod linear;

pub use conv::{dense_conv_backward, dense_conv_forward};
pub use fd::finite_difference_grad;
pub use linear::{dense_linear_backward, dense_linear_forward};
