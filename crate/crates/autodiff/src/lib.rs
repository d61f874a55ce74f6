//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! The engine is a tape ([`Graph`]) that evaluates ops eagerly and
//! records enough state to backpropagate from a scalar. Parameters live in a
//! [`ParamStore`]; layers in [`layers`] only keep handles into it, so one
//! store can feed many independent graphs (one per worker) while updates stay
//! sequential.

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod params;
pub mod tensor;

pub use error::{AdError, Result};
pub use gradcheck::{grad_check, grad_check_params};
pub use graph::{Graph, Var};
pub use layers::{BiGru, Conv2d, ConvBlock, Dense, Gru, Module, SelfAttention};
pub use params::{Adam, AdamConfig, Gradients, ParamId, ParamStore};
pub use tensor::Tensor;

pub use rand_chacha::ChaCha8Rng;

/// Seeded generator used for all weight initialization.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}
