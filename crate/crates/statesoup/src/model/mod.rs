//! The stacked gated-linear recurrent language model: configuration,
//! parameters, snapshotable state, stepping, and loss evaluation.

pub mod config;
pub(crate) mod engine;
pub mod forward;
pub mod params;
pub mod state;

pub use config::{DtypePolicy, ModelConfig};
pub use forward::{forward_step, layer_step, process_sequence, sequence_loss, TokenModel};
pub use params::{init_model, LayerParams, ModelParams};
pub use state::{zero_state, LayerState, SnapshotMeta, StateSnapshot};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("token {token} out of range for vocab size {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("non-finite input")]
    NonFiniteInput,
    #[error("sequence of length {0} is too short, need at least 2 tokens")]
    SequenceTooShort(usize),
    #[error("non-finite loss")]
    NonFiniteLoss,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}
