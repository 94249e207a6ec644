//! Variational two-latent image translation.
//!
//! Each domain owns a VAE whose latent splits into a domain-specific style
//! vector `y` and a domain-shared content vector `z`. Translation keeps the
//! source image's content posterior and swaps in a style drawn from the
//! target domain's prior.

pub mod autodiff;
pub mod checkpoint;
pub mod data_synth;
pub mod distributions;
pub mod error;
pub mod evaluation;
pub mod metrics;
pub mod networks;
pub mod objectives;
pub mod rng;
pub mod trainer;
pub mod translation;
#[cfg(test)]
mod testutil;
pub use error::{Error, Result};
