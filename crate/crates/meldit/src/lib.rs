//! Score-conditioned singing-voice synthesis at desk scale.
//!
//! The crate trains a diffusion transformer to denoise mel-spectrogram
//! latents conditioned on a musical score. Alignment between score tokens
//! and mel frames is implicit: cross-attention is restricted by a binary
//! bias mask built from character note spans, so no phoneme-level duration
//! labels are needed. A deterministic oracle synthesizer stands in for real
//! singers, which keeps the whole pipeline reproducible and testable on one
//! CPU.
//!
//! Module map:
//! - [`numerics`]: dense `f64` matrices, seeded RNG, reverse-mode autodiff,
//!   gradient checking.
//! - [`score`]: score types, synthetic melody/lyric generation, the oracle
//!   synthesizer, and corpus serialization.
//! - [`alignment`]: span extension and the additive cross-attention mask.
//! - [`model`]: condition encoder, mel tokenizer, DiT blocks, noise
//!   prediction, FLOP/parameter accounting.
//! - [`diffusion`]: noise schedule, training loss, classifier-free guidance,
//!   ancestral and ODE samplers.
//! - [`trainer`]: AdamW training loop, checkpointing, experiment drivers.
//! - [`metrics`]: loudness normalization, mel cepstra, DTW, MCD/FFE/F0-RMSE.
//! - [`cli`]: run configs and the `meldit` subcommand implementations.

pub mod alignment;
pub mod cli;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod score;
pub mod trainer;

pub use error::{Error, Result};
