//! Context-window extension for RoPE transformers by training once on short
//! windows with randomly sampled interpolation scales and position offsets.
//!
//! The crate carries its own small autograd engine ([`tensor`]), a decoder-only
//! transformer ([`model`]) whose rotary embeddings take an arbitrary scale and
//! per-position offset on every call, the augmentation samplers
//! ([`augment`]), the training loop ([`train`]) and the evaluation battery
//! ([`eval`]).

pub mod augment;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod model;
pub mod output;
pub mod rope;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
