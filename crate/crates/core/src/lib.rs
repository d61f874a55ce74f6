//! Differentiable multi-source tracking for DOA regression.

pub mod assignment;
pub mod error;
pub mod geometry;
pub mod hnet;
pub mod localizer;
pub mod loss;
pub mod metrics;
pub mod scene;

pub use error::{Error, Result};
