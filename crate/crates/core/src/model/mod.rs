//! The multitask translation network and its building blocks.

mod checkpoint;
mod config;
mod dense;
pub mod gates;
mod network;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use config::ModelConfig;
pub use dense::DenseBlock;
pub use network::{Branches, Edge, EdgeKind, ForwardResult, Network, Node, ParamGroup};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("attention mask values must lie in [0, 1]")]
    InvalidMask,
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
