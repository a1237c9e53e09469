//! Non-autoregressive text-to-speech acoustic model built around a deep
//! hierarchical VAE over mel-spectrograms.
//!
//! The crate provides the full pipeline as a library: a small 64-bit autodiff
//! substrate ([`numerics`]), feature extraction and corpus handling, the
//! model itself (text encoder, coarse-to-fine residual attention, the
//! hierarchical latent decoder and a speaking-speed predictor), training with
//! checkpointing, and diagnostics. The accompanying `vara-cli` binary wraps
//! these pieces for end-to-end runs; the guide under `book/` walks through
//! the concepts with runnable snippets.
//!
//! Everything is deterministic given a seed: training twice with the same
//! configuration and seed produces bit-identical parameters.

pub mod config;
pub mod data;
pub mod error;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod report;
pub mod trainer;

pub use error::{Error, Result};
