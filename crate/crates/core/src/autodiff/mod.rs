//! Reverse-mode automatic differentiation over dense `f64` tensors, the layer
//! graph used by every learned module, the Adam optimizer and the model
//! serialization format.

mod check;
mod graph;
mod io;
mod optim;
mod tape;
mod tensor;

pub use check::{gradient_check, graph_gradient_check, random_tensor};
pub use graph::{Activation, Graph, GraphGrads, LayerKind, Mode, NodeId, PowerScope};
pub use io::{load_bundle, save_bundle, ModelBundle};
pub use optim::Adam;
pub use tape::{permutation_index, Grads, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::write_cmatrix;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("shape mismatch at {node}: {detail}")]
    Shape { node: String, detail: String },
    #[error("backward called before a train-mode forward")]
    NoForward,
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("model file: {0}")]
    Io(#[from] std::io::Error),
    #[error("model manifest: {0}")]
    Manifest(String),
}
