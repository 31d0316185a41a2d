//! Instruction-aware path proposal and discrimination on 3D semantic voxel maps.

pub mod config;
pub mod discriminator;
pub mod envgen;
pub mod instruction_parser;
pub mod metrics;
pub mod nn;
pub mod path_encoder;
pub mod path_proposer;
pub mod pipeline;
pub mod scalar;
pub mod semantic_map;

pub use scalar::Scalar;

/// Discriminator in single precision, as trained and checkpointed.
pub type Model = discriminator::IppdModel<f32>;
/// Double-precision discriminator for gradient checks.
pub type Model64 = discriminator::IppdModel<f64>;
