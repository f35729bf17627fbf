//! Imputation of sparse learner-performance data.
//!
//! Performance records (correct/incorrect/unattempted) from tutoring-system
//! logs are arranged as a 3D tensor over learners × questions × attempts.
//! This crate provides:
//!
//! - [`tensor`]: the tensor types, mask/slice/truncate operations and the
//!   observed/generated merge formula,
//! - [`ingest`]: interaction-log parsing and a synthetic generator with
//!   known ground truth,
//! - [`neural`]: a small convolutional network kernel with exact
//!   tape-based gradients and an Adam optimizer,
//! - [`gain`]: the adversarial imputer (conditional generator plus
//!   hint-conditioned discriminator),
//! - [`gan`]: an unconditional GAN imputer baseline,
//! - [`factorization`]: rank-constrained tensor factorization, CPD and
//!   Bayesian probabilistic tensor factorization baselines,
//! - [`eval`]: cross-validated RMSE benchmarking with Spearman
//!   rank-correlation reporting.

pub mod error;
pub mod eval;
pub mod factorization;
pub mod gain;
pub mod gan;
pub mod ingest;
pub mod neural;
pub mod tensor;

pub use error::{Error, Result};
