//! Class-incremental learning lab.
//!
//! Two replay baselines that differ only in the loss used to train the feature
//! extractor: full cross-entropy over every class seen so far (learns
//! cross-task features) and intra-task cross-entropy (each sample normalised
//! over its own task's classes only). Both run the same two-step procedure per
//! task: train on new data plus the exemplar memory, then fine-tune the
//! classifier alone on the class-balanced memory with the extractor frozen.
//!
//! Modules:
//!
//! - [`nn`]: dense extractor + growing linear head, backprop, SGD, patience schedule
//! - [`data`]: task sequences, IDX loading, the synthetic cross-task generator
//! - [`replay`]: exemplar memory with herding or random selection
//! - [`train`]: the two losses and the incremental training procedure
//! - [`metrics`]: classic and cumulative accuracy/forgetting, task-aware and
//!   task-inference accuracy, prediction logs
//! - [`runner`]: config-driven experiment grids, CSV artifacts, memory sweeps

pub mod data;
mod error;
pub mod metrics;
pub mod nn;
pub mod replay;
pub mod runner;
mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
