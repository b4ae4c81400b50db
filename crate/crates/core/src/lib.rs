//! Multitask affect training: seven-class facial expression plus valence/arousal,
//! learned from several partially labelled datasets with a teacher/student
//! distillation scheme.
//!
//! Layout:
//! - [`losses`]: supervision, distillation and batch-level objectives with analytic gradients.
//! - [`metrics`]: challenge scores (F1/accuracy blend, mean CCC).
//! - [`datakit`]: manifests, balancing, three-part batch sampling, synthetic corpora,
//!   sequence windows, augmentation and on-disk stores.
//! - [`models`]: convolutional frame model, bidirectional GRU temporal model, checkpoints.
//! - [`trainer`]: teacher and student training loops, early stopping, the full pipeline.
//!
//! Per-instance work inside a batch is spread over a rayon pool when the `parallel`
//! feature is enabled (the default). Reductions always run in instance order, so
//! results are bit-identical with and without the feature.

pub mod datakit;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod par;
pub mod seed;
pub mod trainer;

pub use error::{Error, Result};
