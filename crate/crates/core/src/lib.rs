//! Hierarchical recurrent multi-label video classification.
//!
//! Frame-level features pass through a bidirectional GRU encoder, an
//! optional temporal reduction stage, and attention pooling, then a
//! video-level head (mixture of experts, hierarchical MoE, or a classifier
//! chain) produces per-class probabilities scored with GAP@k.

// `!(x > 0.0)` style checks reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod checkpoint;
mod codec;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod predictions;
pub mod recurrent;
pub mod reduction;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tape::{Backward, Gradients, ParamId, ParamStore, Tape, Var};
pub use tensor::Tensor;
