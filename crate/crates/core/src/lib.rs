//! Spatial-shift MLP vision backbone with split-attention fusion.
//!
//! The crate provides a small dense tensor type, the shift and attention
//! kernels, a reverse-mode tape for gradients, model construction for the
//! named presets, parameter/FLOP accounting, an AdamW training harness and a
//! binary weight archive.

pub mod analysis;
pub mod archive;
pub mod attention;
pub mod autograd;
pub mod configfile;
pub mod error;
pub mod gradsuite;
pub mod model;
pub mod shift;
pub mod tensor;
pub mod training;

pub use archive::{load_weights, save_weights, WeightArchive};
pub use error::{Error, Result};
pub use model::{build_config, FusionMode, ModelConfig, Preset, StageConfig};
pub use tensor::{FeatureMap, Tensor};
