//! Layer-wise pruning-rate search for decoder-only transformers.
//!
//! An evolutionary loop proposes per-block removal fractions that average to
//! a global budget. Each candidate is realized by structured pruning of
//! attention heads and FFN channels (ranked by weight-times-activation-norm
//! importance) and scored by perplexity. Genetic operators come either from a
//! chat model driven by prompts or from a seeded offline sampler.
//!
//! Model math is generic over [`Scalar`] (`f32` or `f64`); the aliases below
//! name the concrete types used by the command-line tool.

pub mod config_space;
pub mod engine;
pub mod evolution;
pub mod operator;
pub mod pruner;
pub mod scalar;

pub use config_space::{PruningConfig, RepairReport};
pub use scalar::Scalar;

/// Single-precision model, the format stored on disk.
pub type ModelF32 = engine::Model<f32>;
/// Double-precision model, used for cross-precision checks.
pub type ModelF64 = engine::Model<f64>;
pub type ActivationStatsF32 = engine::ActivationStats<f32>;
pub type ActivationStatsF64 = engine::ActivationStats<f64>;
pub type MatrixF32 = engine::Matrix<f32>;
pub type PerplexityFitnessF32<'a> = evolution::PerplexityFitness<'a, f32>;
