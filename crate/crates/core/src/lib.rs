//! Staged vision-language model training at desk scale.

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod masks;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use graph::{Graph, Var, IGNORE_INDEX, MASK_SENTINEL};
pub use tensor::Tensor;
