//! Numerical laboratory for the equivalence between linear self-attention
//! and gradient descent on in-context regression tasks: exact weight
//! constructions, explicit GD baselines, meta-training of small
//! transformers, and alignment/analysis tooling.

pub mod analysis;
pub mod baselines;
pub mod checkpoint;
pub mod constructions;
pub mod error;
pub mod model;
pub mod numerics;
pub mod taskgen;
pub mod training;

pub use error::{Error, Result};
pub use model::{AttnKind, HeadWeights, LayerSpec, ModelConfig, ModelParams};
pub use numerics::matrix::Matrix;
pub use numerics::rng::{Seed, SeedStream};
pub use taskgen::{Task, TokenSeq};
