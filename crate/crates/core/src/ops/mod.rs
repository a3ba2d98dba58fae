//! Forward and backward kernels on plain tensors. The [`crate::graph`]
//! module records these on a tape.

pub mod conv;
pub mod elementwise;
pub mod loss;
pub mod norm;
pub mod pool;
pub mod resample;

pub use conv::ConvSpec;
pub use loss::IGNORE_LABEL;
pub use norm::BatchNormState;
pub use pool::PoolSpec;
