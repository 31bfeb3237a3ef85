//! Gated recursive joint cross-attention for audio-visual valence/arousal
//! regression, with the CCC objective, a desk-scale training protocol and a
//! synthetic benchmark with controllable modality corruption.

// Negated comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod benchmark;
pub mod cli;
pub mod config;
pub mod error;
pub mod fusion;
pub mod metrics;
pub mod model;
pub mod numcore;
pub mod synthdata;
pub mod temporal;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
