//! Dense linear algebra, Gaussian special functions, and reverse-mode
//! automatic differentiation.
//!
//! Everything downstream builds on these primitives: the rotation-scaling
//! covariance parametrization uses [`rotation_matrix`] and [`Matrix::cholesky`],
//! the truncated marginals use [`std_normal_cdf`] / [`std_normal_quantile`],
//! and all training gradients flow through [`Tape`].

mod matrix;
mod rotation;
mod special;
mod tape;

pub use matrix::Matrix;
pub use rotation::rotation_matrix;
pub use rotation::angle_count;
pub use special::{std_normal_cdf, std_normal_pdf, std_normal_quantile, std_normal_sf};
pub use tape::{grad, value_and_grad, Gradients, Tape, Unary, Var};
