//! Numerical laboratory for gradient-descent instabilities.
//!
//! The crate has three layers:
//!
//! * exact analytics for diagonal linear networks ([`dln_exact`] for the
//!   two-parameter model, [`dln_general`] for `n` parameters and additive sums);
//! * a small MLP engine with exact gradients and Hessian-vector products
//!   ([`nn`]), plus a matrix-free Lanczos eigensolver and eigenvector
//!   similarity metrics ([`spectral`]);
//! * a deterministic full-batch gradient-descent driver ([`trainer`]) and
//!   Fashion-MNIST ingestion ([`data_io`]).

// `!(x > 0.0)` is how NaN gets rejected along with the out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod data_io;
pub mod dln_exact;
pub mod dln_general;
mod error;
pub mod linalg;
pub mod nn;
pub mod objective;
pub mod poly;
pub mod spectral;
pub mod trainer;

pub use error::{Error, Result};
pub use nn::{Activation, Batch, LossKind, Mlp, MlpObjective, MlpSpec, Targets};
pub use objective::Objective;
pub use poly::PolyLoss;
pub use spectral::{Spectrum, SymmetricOperator};
