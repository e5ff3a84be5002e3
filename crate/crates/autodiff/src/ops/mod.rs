//! Forward and backward kernels on plain tensors. The [`Tape`](crate::Tape)
//! records these; they are also usable on their own for inference.

pub mod activation;
pub mod attention;
pub mod conv;
pub mod gram;
pub mod layout;
pub mod linalg;
pub mod norm;

pub use activation::{gelu, log_softmax_row, normal_cdf, relu, softmax, softmax_cross_entropy};
pub use attention::attention;
pub use conv::{adaptive_avg_pool2d, conv2d, pool2d, ConvGeom, PoolKind};
pub use gram::{gram, gram_matrix};
pub use layout::{add_broadcast, concat, expand_leading, narrow, patchify};
pub use linalg::{linear, matmul};
pub use norm::{batch_norm, layer_norm, BatchNormMode, BatchStats, NormCache};
