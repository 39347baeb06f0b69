//! Snapshotable recurrent state: the unit of storage, retrieval, and mixing.

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::ModelError;

/// Recurrent state of one layer.
///
/// `ssm` is stored n-major (`[N][D]`, entry (n, d) at `n * D + d`) so the
/// recurrence sweeps contiguous channel rows. `conv_buf` holds the last W
/// pre-conv inputs oldest-first (`[W][D]`). `log_decay` accumulates
/// Σ log A_t entrywise in 64-bit since the last reset; it is the prefix
/// product of transition coefficients in log form.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerState {
    pub ssm: Vec<f32>,
    pub conv_buf: Vec<f32>,
    pub log_decay: Vec<f64>,
    /// Channel count D; makes the flat tensors self-describing
    /// (N = ssm.len() / D, W = conv_buf.len() / D).
    pub channels: usize,
}

impl LayerState {
    pub fn zeros(config: &ModelConfig) -> Self {
        let dn = config.embed_dim * config.state_dim;
        LayerState {
            ssm: vec![0.0; dn],
            conv_buf: vec![0.0; config.conv_width * config.embed_dim],
            log_decay: vec![0.0; dn],
            channels: config.embed_dim,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.ssm.len() / self.channels
    }

    pub fn conv_width(&self) -> usize {
        self.conv_buf.len() / self.channels
    }
}

/// Metadata describing how a snapshot was produced.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotMeta {
    /// Task the state was captured from, empty when not task-derived.
    pub task_label: String,
    /// Number of demonstration examples processed into the state.
    pub shots: usize,
    /// Total tokens processed into the state.
    pub token_count: usize,
    /// Stable hash of the producing model's config.
    pub model_hash: u64,
}

/// A full model state: one `LayerState` per layer plus provenance metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSnapshot {
    pub layers: Vec<LayerState>,
    pub meta: SnapshotMeta,
}

impl StateSnapshot {
    /// Check that layer count and tensor shapes match `config`.
    pub fn check_shape(&self, config: &ModelConfig) -> Result<(), ModelError> {
        if self.layers.len() != config.num_layers {
            return Err(ModelError::ShapeMismatch(format!(
                "snapshot has {} layers, config wants {}",
                self.layers.len(),
                config.num_layers
            )));
        }
        let dn = config.embed_dim * config.state_dim;
        let wd = config.conv_width * config.embed_dim;
        for (i, l) in self.layers.iter().enumerate() {
            if l.ssm.len() != dn
                || l.conv_buf.len() != wd
                || l.log_decay.len() != dn
                || l.channels != config.embed_dim
            {
                return Err(ModelError::ShapeMismatch(format!(
                    "layer {i} tensor sizes do not match config"
                )));
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.ssm.iter().all(|v| v.is_finite())
                && l.conv_buf.iter().all(|v| v.is_finite())
                && l.log_decay.iter().all(|v| v.is_finite())
        })
    }
}

/// The all-zero state: zero ssm, zero conv buffers, zero decay log,
/// token_count 0.
pub fn zero_state(config: &ModelConfig) -> Result<StateSnapshot, ModelError> {
    config.validate()?;
    Ok(StateSnapshot {
        layers: (0..config.num_layers)
            .map(|_| LayerState::zeros(config))
            .collect(),
        meta: SnapshotMeta {
            task_label: String::new(),
            shots: 0,
            token_count: 0,
            model_hash: config.stable_hash(),
        },
    })
}
