//! Target-speaker speech-image retrieval laboratory.
//!
//! A self-contained numeric core with reverse-mode differentiation drives a
//! small transformer speech encoder, a frozen image projection, and the
//! speaker-conditioned adapter family (conditional layer norm, conditional
//! convolution, bottleneck conditional convolution). Synthetic multi-speaker
//! corpora, contrastive objectives, Recall@K evaluation, and a deterministic
//! Adam trainer complete the loop.

pub mod config;
pub mod container;
pub mod datagen;
pub mod encoder;
pub mod error;
pub mod gradsuite;
pub mod numcore;
pub mod objective;
pub mod retrieval;
pub mod rng;
pub mod trainer;
pub mod tsre;

pub use error::{Error, Result};
