//! Adaptive denoising training for implicit-feedback recommenders.
//!
//! The crate covers the whole experiment path: datasets with (optional)
//! ground-truth noise flags, three neural recommenders with analytic
//! gradients, truncated and reweighted cross-entropy losses, training with
//! extra feedback, colliding inference for sparse users, and top-K ranking
//! evaluation.

pub mod colliding;
pub mod data;
pub mod denoise;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
