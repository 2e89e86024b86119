//! Small differentiable-computation kit: tensors, dense/conv layers, losses,
//! Adam, and JSON checkpoints. Everything is `f64` and CPU-only.

mod adam;
mod checkpoint;
mod gradcheck;
mod layers;
pub mod loss;
mod network;
mod tensor;

pub use adam::Adam;
pub use checkpoint::{load_network, load_network_like, save_network, CHECKPOINT_FORMAT};
pub use gradcheck::{check_gradients, GradCheck};
pub use layers::{sigmoid, Conv2d, Dense, Layer};
pub use network::Network;
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape error{}: {msg}", layer.map(|l| format!(" at layer {l}")).unwrap_or_default())]
    Shape { layer: Option<usize>, msg: String },
    #[error("backward called without a preceding forward pass")]
    NoForwardCache,
    #[error("non-finite gradient in layer {layer}")]
    NonFinite { layer: usize },
    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}
