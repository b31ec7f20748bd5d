//! Adversarial shared-private multi-task BiLSTM-max sentence encoders, tools
//! for unifying their embeddings with precomputed vectors, and a
//! frozen-feature evaluation harness.

pub mod combiner;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod multitask;
pub mod rng;
pub mod tensor;
pub mod text;
pub mod verify;

pub use error::{Error, Result};
