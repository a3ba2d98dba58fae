//! Differentiable tensor engine plus a segmentation network built on it:
//! a residual encoder and a decoder that aligns features across stages with
//! predicted flow.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod network;
pub mod nn;
pub mod ops;
pub mod tensor;
pub mod training;

use serde::{Deserialize, Serialize};

pub use error::{Error, Result};
pub use graph::{Graph, OpKind, Var};
pub use tensor::{DType, Element, Tensor};

/// Whether batch norm uses batch statistics and auxiliary heads are built.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Train,
    Infer,
}
