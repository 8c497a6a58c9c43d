//! Semi-implicit variational inference for Bayesian spatial interpolation.
//!
//! The crate fits geostatistical models with Gaussian or Poisson outcomes using
//! a neural-generator variational family, with either a dense Gaussian-process
//! prior or a nearest-neighbor (Vecchia) approximation on the spatial random
//! effects. It also provides data simulation, posterior prediction at held-out
//! locations, and proper-scoring evaluation, all wired together by the
//! `sivi-spatial` command-line binary.

pub mod autodiff;
pub mod cli;
pub mod covariance;
pub mod diagnostics;
pub mod error;
pub mod models;
pub mod nngp;
pub mod predict;
pub mod scoring;
pub mod simulate;
pub mod sivi;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
