//! Dense tensors and reverse-mode differentiation for the Tex-ViT detector.
//!
//! Everything is generic over [`Scalar`]: models train in `f32` and the same
//! graphs are instantiated in `f64` for finite-difference checks. All
//! reductions run in a fixed loop order; work split across threads is split
//! per sample and recombined in sample order, so results do not depend on
//! the thread count.

pub mod error;
pub mod gradcheck;
pub mod ops;
pub mod params;
pub mod probes;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use gradcheck::{grad_check, relative_error, GradCheckOptions, GradCheckReport, Probe};
pub use ops::{BatchNormMode, PoolKind};
pub use params::{ParamEntry, ParamStore};
pub use probes::{primitive_probes, probe_by_name, GradProbe};
pub use rng::RngState;
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
