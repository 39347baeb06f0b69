//! Model hyperparameters and the stable config hash carried by snapshots.

use serde::{Deserialize, Serialize};

use super::ModelError;

/// Numeric policy for the engine: tensors and states are stored as 32-bit
/// floats; long-horizon accumulators (decay logs, losses) are kept in 64-bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum DtypePolicy {
    #[default]
    #[serde(rename = "f32-storage/f64-accumulate")]
    F32StorageF64Accumulate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Token alphabet size.
    pub vocab_size: usize,
    /// Residual stream / channel dimension D.
    pub embed_dim: usize,
    /// Per-channel recurrent state dimension N.
    pub state_dim: usize,
    /// Number of stacked layers L.
    pub num_layers: usize,
    /// Depthwise causal convolution width W.
    pub conv_width: usize,
    #[serde(default)]
    pub dtype: DtypePolicy,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 256,
            embed_dim: 64,
            state_dim: 16,
            num_layers: 4,
            conv_width: 4,
            dtype: DtypePolicy::F32StorageF64Accumulate,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.vocab_size < 1
            || self.embed_dim < 1
            || self.state_dim < 1
            || self.num_layers < 1
            || self.conv_width < 1
        {
            return Err(ModelError::InvalidConfig(format!(
                "all dimensions must be >= 1, got vocab={} d={} n={} l={} w={}",
                self.vocab_size, self.embed_dim, self.state_dim, self.num_layers, self.conv_width
            )));
        }
        Ok(())
    }

    /// Stable 64-bit hash of the configuration. Snapshots and libraries
    /// carry this value so that states are never mixed or retrieved across
    /// incompatible model shapes.
    pub fn stable_hash(&self) -> u64 {
        let repr = format!(
            "ssoup-config:vocab={};d={};n={};l={};w={};dtype=f32/f64",
            self.vocab_size, self.embed_dim, self.state_dim, self.num_layers, self.conv_width
        );
        fnv1a64(repr.as_bytes())
    }
}

/// FNV-1a, 64-bit. Stable across platforms and runs.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
