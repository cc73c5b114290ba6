// SPDX-License-Identifier: MIT OR Apache-2.0

//! Lexical-versus-semantic decomposition of neuron overlap.
//!
//! The crate consumes activation stores (see [`store`]) exported from a
//! language model and measures how much of the activation overlap between
//! two uses of a polysemous word is explained by the shared word form rather
//! than shared meaning. Analyses are deterministic given a seed; nothing
//! here runs a model.

pub mod cli;
pub mod decompose;
pub mod error;
pub mod intervene;
pub mod lis;
pub mod neurons;
pub mod oracle;
pub mod overlap;
pub mod pairing;
pub mod probe;
pub mod report;
pub mod rng;
pub mod saecollide;
pub mod stats;
pub mod store;
pub mod synth;

pub use error::{LexError, Result};
