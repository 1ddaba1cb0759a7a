//! Trimmed skip-thought sentence encoder.
//!
//! A GRU encoder turns a sentence into a fixed vector, a connection layer
//! (final state or mean+max pooling) produces the sentence representation,
//! and a single conditional-GRU decoder learns to predict the next sentence
//! from it. Everything numeric, including reverse-mode differentiation, is
//! implemented in [`numerics`].

pub mod app;
pub mod cells;
pub mod embeddings;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod numerics;
pub mod retrieval;
pub mod training;

pub use error::{Error, Result};
pub use numerics::{Graph, NodeId, Tensor};
