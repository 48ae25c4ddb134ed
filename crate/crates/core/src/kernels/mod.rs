//! Forward/backward kernels on plain tensors. The tape in [`crate::tape`]
//! records calls into these.

pub mod conv;
pub mod loss;
pub mod norm;
pub mod pool;

pub use conv::{conv2d, conv2d_backward, conv_transpose2d, conv_transpose2d_backward, ConvParams};
pub use norm::{NormMode, RunningStats, BN_EPSILON, BN_MOMENTUM};
pub use pool::{maxpool2d, PoolParams};
