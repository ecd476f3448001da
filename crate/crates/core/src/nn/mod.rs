//! Small dense/convolutional network kernel with reverse-mode gradients.
//!
//! Graphs are declared with [`GraphBuilder`], which checks shapes as layers are
//! added. Every tensor carries an explicit leading batch dimension.

mod adam;
mod gradcheck;
mod graph;
mod io;
mod loss;
mod tensor;

pub use adam::AdamState;
pub use gradcheck::{compare_gradients, fd_rel_error, grad_check, head_gradients, GradCheckReport};
pub use graph::{Cache, Gradients, Graph, GraphBuilder, LayerSpec, Node, NodeId, NodeOp};
pub use io::{decode_params_into, encode_params, load_params, save_params, FORMAT_VERSION, MAGIC};
pub use loss::huber_loss;
pub use tensor::{argmax_first, Real, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch in '{layer}': expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        layer: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("invalid layer '{layer}': {reason}")]
    InvalidLayer { layer: String, reason: String },
    #[error("stale cache: {0}")]
    StaleCache(String),
    #[error("non-finite gradient in tensor {tensor} at {index}: {value}")]
    NonFiniteGradient { tensor: usize, index: usize, value: f64 },
    #[error("malformed parameter data: {0}")]
    Format(String),
    #[error("checksum mismatch in tensor {tensor}")]
    Checksum { tensor: usize },
    #[error("architecture mismatch:\nexpected\n{expected}\nfound\n{found}")]
    ArchitectureMismatch { expected: String, found: String },
    #[error("io: {0}")]
    Io(String),
}
