//! Gradient compression and data attribution.
//!
//! The crate is organized bottom-up:
//!
//! - [`sketch`]: seeded random projections (Gaussian, Rademacher, FJLT, SJLT).
//! - [`mask`]: Random and Selective Mask sparsification.
//! - [`compressor`]: composed pipelines (GraSS = mask then SJLT) and the
//!   compressor spec grammar.
//! - [`model`]: small MLPs with per-sample gradients and linear-layer traces.
//! - [`factorized`]: LoGra and FactGraSS for linear layers.
//! - [`attribution`]: FIM accumulation, damped iFVP, influence scores and the
//!   on-disk gradient store.
//! - [`eval`]: LDS counterfactual evaluation, damping search and throughput
//!   comparison.
//! - [`cli`]: the `grass` command line driver.

pub mod attribution;
pub mod cli;
pub mod compressor;
pub mod error;
pub mod eval;
pub mod factorized;
pub mod gradient;
pub mod prf;
pub mod mask;
pub mod model;
pub mod sketch;

pub use error::{Error, Result};
pub use gradient::{GradientVector, OpCount, Scalar};
