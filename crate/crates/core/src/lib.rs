//! Foreign patch interpolation (FPI) self-supervised anomaly detection.
//!
//! Training samples are made by blending a patch of one subject's slice with
//! the same region of another subject's slice; a wide residual
//! encoder-decoder learns to predict, per pixel, how much foreign content was
//! blended in. The same estimate serves as the anomaly score at test time.

pub mod error;
pub mod eval;
pub mod manifest;
pub mod metrics;
pub mod nn;
pub mod phantom;
pub mod rng;
pub mod scorer;
pub mod synth;
pub mod train;
pub mod testbench;
pub mod volume;

pub use error::{Error, ErrorClass, Result};
