//! Importance-scored single-shot pruning of small transformer and MLP
//! models, with lottery-ticket rewinding and mask-overlap analysis.

pub mod analysis;
pub mod commands;
pub mod config;
pub mod container;
pub mod error;
pub mod lth;
pub mod masking;
pub mod nn;
pub mod strategies;
pub mod tasks;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
