//! Class-incremental continual learning on feature-space datasets.
//!
//! The engine trains a representation head and a growing linear classifier
//! task by task, with the representation learning at a much smaller rate than
//! the classifier. After each task it keeps only Gaussian statistics of every
//! class's features, and before evaluation it realigns a copy of the
//! classifier on features sampled from those statistics using a
//! logit-normalized cross-entropy.
//!
//! Modules, bottom-up:
//!
//! * [`linalg`]: dense matrices, Cholesky, seeded Gaussian sampling
//! * [`losses`]: cross-entropy and logit-normalized cross-entropy
//! * [`model`]: representation head, classifier, gradients, checkpoints
//! * [`optimizer`]: two-rate SGD
//! * [`stats`]: per-class Gaussian statistics
//! * [`alignment`]: post-hoc classifier alignment
//! * [`protocol`]: the task loop, baselines and metrics
//! * [`analysis`]: CKA and linear probing
//! * [`dataio`]: the `SLCF` feature format, splits, synthetic data
//! * [`cli`]: the `slca` command line

pub mod alignment;
pub mod analysis;
pub mod cli;
mod codec;
pub mod dataio;
pub mod error;
pub mod linalg;
pub mod losses;
pub mod model;
pub mod optimizer;
pub mod protocol;
mod rng;
pub mod stats;

pub use error::{Error, Result};
