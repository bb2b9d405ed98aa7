//! Neural architecture representation toolkit.
//!
//! Encodes computation-graph descriptions of neural networks into token
//! sequences, learns a compact vector representation with a multi-stage
//! fusion transformer, and predicts holistic attributes (accuracy,
//! latency). Includes flow-consistent data augmentation and a
//! predictor-guided evolutionary search harness.

pub mod augment;
pub mod error;
pub mod graph;
pub mod model;
pub mod numeric;
pub mod objectives;
pub mod par;
pub mod search;
pub mod tokenizer;
pub mod trainer;

pub use error::{NarError, Result};
