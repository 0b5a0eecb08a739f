//! LDAuCID: continual unsupervised domain adaptation by consolidating an
//! internal Gaussian-mixture distribution, aligning each arriving domain to
//! it with the sliced Wasserstein distance, and replaying mean-of-features
//! exemplars against catastrophic forgetting.
//!
//! The crate is organized around the algorithm's moving parts:
//!
//! - [`nn`] — dense encoder/classifier networks, reverse mode, Adam
//! - [`swd`] — sliced Wasserstein estimator, gradient, and exact oracle
//! - [`gmm`] — the internal distribution: MAP fit, sampling, pseudo-datasets
//! - [`buffer`] — mean-of-features selection and the cumulative replay store
//! - [`trainer`] — source training, per-time-step adaptation, diagnostics
//! - [`data`] — synthetic drifting streams and IDX digit loading
//! - [`config`], [`metrics`], [`harness`] — experiment orchestration
//! - [`checkpoint`] — resumable binary snapshots of the trainer state

pub mod buffer;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gmm;
pub mod harness;
pub mod matrix;
pub mod metrics;
pub mod nn;
pub mod selfcheck;
pub mod swd;
pub mod trainer;
pub mod util;

pub use error::{Error, Result};
pub use matrix::Matrix;
