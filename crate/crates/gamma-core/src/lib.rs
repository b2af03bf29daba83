//! Multi-branch geometric message passing engine for inductive knowledge
//! graph link prediction.
//!
//! The engine encodes relations by message passing over a typed relation
//! graph, propagates query-conditioned entity states through parallel
//! algebraic branches (real, complex, split-complex, dual), fuses the
//! branches with temperature-scaled cosine attention, and scores candidate
//! entities with a small feed-forward network. Training uses
//! self-adversarial negative sampling with an entropy regularizer on the
//! attention weights; evaluation follows the filtered-ranking protocol.

pub mod algebra;
pub mod autodiff;
pub mod entnet;
pub mod eval;
pub mod error;
pub mod fusion;
pub mod kgstore;
pub mod model;
pub mod relnet;
pub mod synthkg;
pub mod train;

pub use error::{Error, Result};
