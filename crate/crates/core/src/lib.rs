//! Encoder-stealing research toolkit.
//!
//! The crate simulates an encoder-as-a-service provider, implements the
//! feature-matching stealing attack and its variants, the three
//! output-perturbation defenses, and the downstream-classifier evaluation
//! used to compare target and stolen encoders.

pub mod attack;
pub mod contrastive;
pub mod dataio;
pub mod defense;
pub mod downstream;
pub mod eaas;
pub mod encoder;
pub mod error;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod util;

pub use error::{Error, Result};
