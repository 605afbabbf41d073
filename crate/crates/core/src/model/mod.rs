pub mod config;
pub mod forward;
pub mod generate;
pub mod params;

pub use config::{ComponentCounts, DecoderConfig, VLMConfig, VisionEncoderConfig};
pub use forward::{patchify, BoundModel};
pub use generate::{generate, DecodeMode};
pub use params::{Component, Param, VLMParams};
