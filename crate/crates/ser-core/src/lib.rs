//! Speech emotion recognition from WAV to metrics.
//!
//! The crate covers the whole pipeline:
//!
//! - [`tensor`]: a small deterministic tensor engine with reverse-mode
//!   automatic differentiation (`f64` for tests, `f32` for training);
//! - [`features`]: WAV ingestion, fixed-length segmentation with loop
//!   filling, and MFCC extraction;
//! - [`tsa`]: the temporal / space-channel attention module;
//! - [`lct`]: the lightweight convolution-transformer block;
//! - [`model`]: the assembled classifier with ablation switches;
//! - [`training`]: Adam, mixup, the epoch loop, and the metric suite;
//! - [`checkpoint`] and [`config`]: binary checkpoints and run configs.
//!
//! Everything is single-threaded and bit-reproducible given a seed; see the
//! README for the CLI built on top.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod features;
pub mod gradcheck;
pub mod lct;
pub mod model;
pub mod nn;
pub mod synth;
pub mod tensor;
pub mod training;
pub mod tsa;

pub use error::{Result, SerError};
pub use tensor::{Element, Tensor};
