pub mod arch;
pub mod blocks;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod network;
pub mod profiler;
pub mod scalar;
pub mod suite;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::{Precision, Scalar};
pub use tape::{Tape, Var};
pub use tensor::{Shape, Tensor};
