//! Graph contrastive learning with gated ranking losses over multi-hop
//! neighborhoods.
//!
//! The crate is generic over the scalar type ([`Scalar`], implemented for
//! `f32` and `f64`); the aliases below fix common choices.

pub mod autodiff;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod generate;
pub mod graph;
pub mod loss;
pub mod matrix;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod sampling;
pub mod scalar;
pub mod verify;

pub use error::{Error, Result};
pub use graph::{Graph, HopPartition, NodeId};
pub use loss::{LossConfig, LossVariant, PositiveGrouping};
pub use matrix::{Matrix, SparseMatrix};
pub use pipeline::RunConfig;
pub use scalar::Scalar;

pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type Matrix32 = Matrix<f32>;
pub type Matrix64 = Matrix<f64>;
pub type Tape32 = autodiff::Tape<f32>;
pub type Tape64 = autodiff::Tape<f64>;
pub type EncoderParams32 = encoder::EncoderParams<f32>;
