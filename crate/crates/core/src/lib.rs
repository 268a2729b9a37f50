//! Mixture-of-experts multi-task MOS prediction over precomputed speech
//! embeddings: a softmax-gated expert head with a MOS regression task and a
//! synthesis-system classification task, trained in three stages and
//! evaluated at utterance and system level.

pub mod config;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod numkernel;
pub mod synthgen;
pub mod train;

pub use error::{Error, Result};
