//! Training-dynamics acceleration toolkit.
//!
//! The crate decomposes parameter trajectories into correlated modes, keeps
//! per-parameter affine coefficients against a reference parameter up to date,
//! progressively freezes ("embeds") stable parameters, and smooths training
//! with a sampled moving average that is synchronized back into the live
//! weights. A small rate-distortion codec with analytic gradients and a noisy
//! quadratic model are included to exercise and verify that machinery.
//!
//! All numerical code is generic over [`Real`] (`f32` or `f64`). The `*64`
//! aliases at the crate root fix the scalar to `f64`, which is what the
//! command-line harness and the test-suites use.

pub mod cmd;
pub mod error;
pub mod nqm;
pub mod paramstore;
pub mod pipeline;
pub mod report;
pub mod scalar;
pub mod seed;
pub mod sensitivity;
pub mod sma;
pub mod stdet;
pub mod toymodel;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Real;

pub type FlatParams64 = paramstore::FlatParams<f64>;
pub type TrajectoryLog64 = paramstore::TrajectoryLog<f64>;
pub type ModeDecomposition64 = cmd::ModeDecomposition<f64>;
pub type ToyCodec64 = toymodel::ToyCodec<f64>;
pub type Batch64 = toymodel::Batch<f64>;
pub type LossBreakdown64 = toymodel::LossBreakdown<f64>;
pub type MetricsLog64 = trainer::MetricsLog<f64>;
pub type SmaState64 = sma::SmaState<f64>;
pub type EmbeddingState64 = stdet::EmbeddingState<f64>;
pub type NqmResult64 = nqm::NqmResult<f64>;
