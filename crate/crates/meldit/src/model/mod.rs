//! Transformer denoiser over tokenized mel latents.
//!
//! The model consumes a noisy latent sequence plus three kinds of
//! conditioning (local phoneme features, speaker identity, diffusion
//! timestep) and predicts the noise component. Submodules:
//!
//! - [`config`]: sizes, presets, analytic parameter and FLOP counts.
//! - [`params`]: named parameter storage with deterministic init.
//! - [`net`]: the forward pass, built on the reverse-mode tape.
//! - [`checkpoint`]: binary serialization of config plus parameters.

pub mod checkpoint;
pub mod config;
pub mod net;
pub mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{FlopsBreakdown, ModelConfig, PHONEMES_PER_SECOND};
pub use net::{
    condition_bundle, detokenize, encode_conditions, predict_noise, tokenize,
    unconditional_bundle, ConditionBundle, CondVars, Forward,
};
pub use params::{param_specs, ParamSet, VarMap};
