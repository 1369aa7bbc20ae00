//! Sparse channel selection for stream-attention fusion over ad-hoc
//! microphone arrays.
//!
//! The simplex maps ([`simplex`]) and the fusion layer ([`attention`]) are
//! generic over [`Scalar`] (`f32` or `f64`). The simulator, recognizer and
//! trainer work in `f64`.

pub mod attention;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod recognizer;
pub mod rng;
pub mod scalar;
pub mod sim;
pub mod simplex;
pub mod tensor;
pub mod trainer;

pub use attention::{AttentionParams, FusionStep, FusionStepOutput, StreamFusionParams};
pub use error::{Error, Result};
pub use rng::Rng;
pub use scalar::Scalar;
pub use simplex::{
    project_simplex_oracle, scaling_sparsemax, softmax, sparsemax, Logits, Normalizer, SimplexWeights, Variant,
};
pub use tensor::{Matrix, Vector};

pub type Matrix64 = Matrix<f64>;
pub type Matrix32 = Matrix<f32>;
pub type Logits64 = Logits<f64>;
pub type Logits32 = Logits<f32>;
pub type SimplexWeights64 = SimplexWeights<f64>;
pub type SimplexWeights32 = SimplexWeights<f32>;
pub type FusionParams64 = StreamFusionParams<f64>;
pub type FusionParams32 = StreamFusionParams<f32>;
