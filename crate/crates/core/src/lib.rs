//! Tex-ViT: a ResNet-18 backbone whose Gram-matrix texture taps feed a
//! dual-branch cross-attention transformer, plus the data pipeline,
//! training loop, evaluation protocols and Grad-CAM built around it.

pub mod baseline;
pub mod config;
pub mod data;
pub mod error;
pub mod explain;
pub mod metrics;
pub mod model;
pub mod protocol;
pub mod train;

pub use config::{preset, presets, BackboneConfig, BranchConfig, NormKind, Preset, Tap, TexViTConfig};
pub use error::{Error, Result};
