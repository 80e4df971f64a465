//! Relation-aware diffusion model for content-aware poster layout generation.

pub mod autograd;
pub mod checkpoint;
pub mod container;
pub mod dataset;
pub mod decoder;
pub mod diffusion;
pub mod encoders;
pub mod error;
pub mod experiments;
pub mod gradcheck;
pub mod gram;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod render;
pub mod request;
pub mod synth;
pub mod tensor;
pub mod training;
pub mod types;
pub mod vtram;

pub use error::{Error, Result};
pub use types::*;
