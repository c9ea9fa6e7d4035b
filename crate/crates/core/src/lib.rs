//! Event-based video frame interpolation with a latent diffusion model.
//!
//! The crate provides the full desk-scale pipeline: an event-stream data
//! model with voxel-grid and SCER rasterization, a synthetic scene renderer
//! with a contrast-threshold event simulator, the event-frame hybrid
//! autoencoder with factorized spatial-temporal cross attention and a
//! vector-quantized latent, the latent diffusion stage trained by direct
//! denoised-embedding regression, two-stage training, metrics, and the
//! ablation harness. The `eventdiff` binary exposes all of it as
//! subcommands.

pub mod error;
pub mod config;
pub mod diffusion;
pub mod event;
pub mod hae;
pub mod nn;
pub mod stca;
pub mod synth;
pub mod train;

pub use error::{Error, Result};

/// Deterministic RNG used everywhere randomness is needed; seeded per run so
/// identical configs reproduce identical results byte for byte.
pub type TrainRng = rand_chacha::ChaCha12Rng;
