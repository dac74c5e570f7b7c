//! Tree skeleton expansion networks.
//!
//! The pipeline learns a hierarchical latent tree over binary views of the
//! input variables ([`skeleton`]), widens it with conditional-mutual-information
//! edges into a layered sparse connectivity ([`expansion`]), and turns that
//! connectivity into a masked feedforward network trained with backpropagation
//! ([`nn`]). Dense and magnitude-pruned baselines live next to it, and every
//! trainable architecture is reachable by name through [`registry`].

pub mod bundle;
pub mod config;
pub mod data;
pub mod error;
pub mod expansion;
pub mod interpret;
pub mod ltm;
pub mod nn;
pub mod pipeline;
pub mod registry;
pub mod rng;
pub mod skeleton;
pub mod stats;
pub mod synth;

pub use error::{Error, Result};
