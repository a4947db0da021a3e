//! Monocular depth estimation from a single conditional-diffusion pass.
//!
//! An image is encoded to a latent, a frozen classifier's class probabilities
//! are turned into a 768-wide context vector, one denoising pass of a
//! cross-attention UNet exposes multi-scale features, and an upsampling
//! decoder regresses metric depth from the fused map.

// `!(x > 0.0)` checks are deliberate: they also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cide;
pub mod cli;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod head;
pub mod latent;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod train;

pub use error::{Error, Result};
