//! Versioned binary tensor files.
//!
//! Both file kinds share one envelope: an 8-byte magic, a little-endian u64
//! byte length, a UTF-8 JSON header, then raw little-endian tensor data in
//! manifest order. Models use magic `SSOUPM1\0` and 32-bit floats; libraries
//! use `SSOUPL1\0` with 32-bit state tensors and 64-bit decay logs.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernels::Mat;
use crate::model::{LayerParams, ModelConfig, ModelParams};

pub const MODEL_MAGIC: &[u8; 8] = b"SSOUPM1\0";
pub const LIBRARY_MAGIC: &[u8; 8] = b"SSOUPL1\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: String },
    #[error("unsupported format version {0}")]
    BadVersion(u32),
    #[error("truncated payload: header declares {expected} bytes, file carries {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("missing tensor {0}")]
    MissingTensor(String),
    #[error("tensor {name}: header shape wants {expected} values, payload has {actual}")]
    TensorSize {
        name: String,
        expected: usize,
        actual: usize,
    },
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: usize,
    /// Byte length.
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelHeader {
    format_version: u32,
    config: ModelConfig,
    seed: u64,
    tensors: Vec<TensorEntry>,
}

/// Write `bytes` to `path` atomically (temp file + rename), so re-running
/// never leaves partial output behind.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), std::io::Error> {
    let tmp = path.with_extension("tmp-write");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn encode_envelope(magic: &[u8; 8], header_json: &[u8], payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 8 + header_json.len() + payload.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(header_json);
    out.extend_from_slice(payload);
    out
}

/// Split a file into (header JSON bytes, payload bytes), checking the magic.
pub fn decode_envelope<'a>(
    bytes: &'a [u8],
    magic: &[u8; 8],
) -> Result<(&'a [u8], &'a [u8]), FormatError> {
    let magic_str = String::from_utf8_lossy(magic).into_owned();
    if bytes.len() < 16 || &bytes[..8] != magic {
        return Err(FormatError::BadMagic {
            expected: magic_str,
        });
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + hlen {
        return Err(FormatError::Truncated {
            expected: 16 + hlen,
            actual: bytes.len(),
        });
    }
    Ok((&bytes[16..16 + hlen], &bytes[16 + hlen..]))
}

pub fn f32s_to_le_bytes(values: &[f32], out: &mut Vec<u8>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn f64s_to_le_bytes(values: &[f64], out: &mut Vec<u8>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn f32s_from_le_bytes(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

pub fn f64s_from_le_bytes(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

/// Serialize a model to the `SSOUPM1` format.
pub fn save_model(params: &ModelParams, path: &Path) -> Result<(), FormatError> {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    params.for_each_tensor(|name, values| {
        let offset = payload.len();
        f32s_to_le_bytes(values, &mut payload);
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: params.tensor_shape(name).expect("tensor shape"),
            offset,
            len: values.len() * 4,
        });
    });
    let header = ModelHeader {
        format_version: FORMAT_VERSION,
        config: params.config.clone(),
        seed: params.seed,
        tensors,
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| FormatError::Header(e.to_string()))?;
    let bytes = encode_envelope(MODEL_MAGIC, &header_json, &payload);
    atomic_write(path, &bytes)?;
    Ok(())
}

/// Load a model from the `SSOUPM1` format. Bit-exact inverse of `save_model`.
pub fn load_model(path: &Path) -> Result<ModelParams, FormatError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let (header_json, payload) = decode_envelope(&bytes, MODEL_MAGIC)?;
    let header: ModelHeader =
        serde_json::from_slice(header_json).map_err(|e| FormatError::Header(e.to_string()))?;
    if header.format_version != FORMAT_VERSION {
        return Err(FormatError::BadVersion(header.format_version));
    }
    header
        .config
        .validate()
        .map_err(|e| FormatError::Header(e.to_string()))?;

    let expected: usize = header.tensors.iter().map(|t| t.len).sum();
    if payload.len() != expected {
        return Err(FormatError::Truncated {
            expected,
            actual: payload.len(),
        });
    }

    let mut params = empty_params(&header.config, header.seed);
    let mut loaded = std::collections::HashSet::new();
    for t in &header.tensors {
        if t.offset + t.len > payload.len() {
            return Err(FormatError::Truncated {
                expected: t.offset + t.len,
                actual: payload.len(),
            });
        }
        let values = f32s_from_le_bytes(&payload[t.offset..t.offset + t.len]);
        let declared: usize = t.shape.iter().product();
        if declared != values.len() {
            return Err(FormatError::TensorSize {
                name: t.name.clone(),
                expected: declared,
                actual: values.len(),
            });
        }
        let mut placed = false;
        params.for_each_tensor_mut(|name, dst| {
            if name == t.name {
                if dst.len() != values.len() {
                    placed = false;
                } else {
                    dst.copy_from_slice(&values);
                    placed = true;
                }
            }
        });
        if !placed {
            return Err(FormatError::TensorSize {
                name: t.name.clone(),
                expected: params
                    .tensor_shape(&t.name)
                    .map(|s| s.iter().product())
                    .unwrap_or(0),
                actual: values.len(),
            });
        }
        loaded.insert(t.name.clone());
    }
    let mut missing = None;
    params.for_each_tensor(|name, _| {
        if !loaded.contains(name) && missing.is_none() {
            missing = Some(name.to_string());
        }
    });
    if let Some(name) = missing {
        return Err(FormatError::MissingTensor(name));
    }
    params.refresh_transposes();
    Ok(params)
}

/// All-zero parameters with the right shapes, used as a loading target.
fn empty_params(config: &ModelConfig, seed: u64) -> ModelParams {
    let (v, d, n, l, w) = (
        config.vocab_size,
        config.embed_dim,
        config.state_dim,
        config.num_layers,
        config.conv_width,
    );
    ModelParams {
        config: config.clone(),
        seed,
        embedding: Mat::zeros(v, d),
        layers: (0..l)
            .map(|_| LayerParams {
                norm_scale: vec![0.0; d],
                w_in: Mat::zeros(d, d),
                conv_kernel: vec![0.0; w * d],
                w_delta: vec![0.0; d],
                b_delta: vec![0.0; d],
                w_b: Mat::zeros(n, d),
                w_c: Mat::zeros(n, d),
                a_log: vec![0.0; n],
                w_gate: Mat::zeros(d, d),
                w_out: Mat::zeros(d, d),
            })
            .collect(),
        final_norm: vec![0.0; d],
    }
}
