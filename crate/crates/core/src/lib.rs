//! Measure how strongly the labels and free-text rationales produced by a
//! self-rationalizing sequence-to-sequence model depend on each other.
//!
//! The crate bundles a small trainable encoder-decoder, gradient
//! attribution split into label and rationale parts, agreement metrics,
//! a noise-robustness sweep, and a line-delimited JSON protocol for
//! driving an external model through the same measurements.

pub mod attribution;
pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod format;
pub mod harness;
pub mod instance;
pub mod metrics;
pub mod model;
pub mod protocol;
pub mod robustness;
pub mod target;
pub mod taskgen;
pub mod vocab;

pub use error::{Error, Result};
pub use format::{Mode, TaskFormat};
pub use instance::RationalizedInstance;
pub use vocab::Vocab;
