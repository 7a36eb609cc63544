//! Out-of-scope intent detection in dual-encoder embedding space.
//!
//! Utterances are represented by two sentence embeddings (a TSDAE stream and
//! a USE stream). A branched dense network is trained as a (K+1)-way
//! classifier on known intents plus synthetic and open-domain outliers, and
//! its softmax output is re-classified as out-of-scope when the winning
//! known-class probability falls below a calibrated threshold.
//!
//! Modules:
//! - [`types`]: embedding matrices, label maps, the dual dataset.
//! - [`nn`]: the branched classifier, loss, AdamW and early-stopped training.
//! - [`outlier`]: synthetic (convex-combination) and open-domain outliers.
//! - [`split`]: known-intent selection and train/val/test assembly.
//! - [`threshold`]: threshold re-classification and its calibration.
//! - [`metrics`]: confusion matrices, F1 scores, run summaries.
//! - [`io`]: embedding/manifest files, toy data, configuration.
//! - [`pipeline`]: the end-to-end experiment runner.

pub mod error;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod outlier;
pub mod pipeline;
pub mod seed;
pub mod split;
pub mod threshold;
pub mod types;

pub use error::{Error, Result};
