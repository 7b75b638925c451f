//! Desk-scale animatable 3D avatar world with incremental GAN-style
//! inversion: a tri-plane generator acts as a self-consistent ground truth,
//! and one-shot plus streaming multi-frame encoders are trained and
//! verified against it.

pub mod checkpoint;
pub mod config;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod facemodel;
pub mod fusion;
pub mod generator;
pub mod graph;
pub mod manifest;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod proxy;
pub mod rasterizer;
pub mod recurrent;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
