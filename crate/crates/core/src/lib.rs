//! Aggregation of per-frame feature sequences into video-level descriptors,
//! multi-label classification with a mixture-of-experts head, global average
//! precision evaluation, and two-stage weighted fusion of predictions.
//!
//! The crate is organized around the pipeline
//! transforms → aggregator → classifier:
//!
//! - [`numeric`]: dense matrices, a deterministic splitmix64 RNG,
//!   activations, and a finite-difference gradient checker.
//! - [`data`]: the video sample model, JSONL dataset and CSV prediction
//!   formats, label statistics, and a seeded synthetic generator.
//! - [`transforms`]: temporal differencing, multi-scale mean pooling,
//!   half-splitting, and frame sampling.
//! - [`aggregators`]: GRU/LSTM stacks (bidirectional and split-bidirectional
//!   variants, residual connections, recurrent dropout), temporal VLAD
//!   pooling, and mean pooling, each with hand-derived backward passes.
//! - [`classifiers`]: the mixture-of-experts head, cross-entropy loss, and
//!   top-k ranking.
//! - [`training`]: seeded mini-batch training with per-epoch learning-rate
//!   decay, label filtering, and bit-exact checkpoints.
//! - [`metrics`]: GAP@k with a naive cross-checking oracle.
//! - [`fusion`]: intra- and inter-model linear weighted fusion with
//!   empirical, grid-search, and regression weight strategies.
//!
//! All training and verification arithmetic is 64-bit; 32-bit precision is
//! used only for frame storage on disk.

pub mod aggregators;
pub mod classifiers;
pub mod data;
pub mod error;
pub mod fusion;
pub mod metrics;
pub mod numeric;
pub mod training;
pub mod transforms;

pub use error::{Error, Result};
