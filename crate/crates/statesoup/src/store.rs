//! Skill library: labeled state snapshots with similarity retrieval and
//! binary persistence.

use std::fs;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::{
    atomic_write, decode_envelope, f32s_from_le_bytes, f32s_to_le_bytes, f64s_from_le_bytes,
    f64s_to_le_bytes, FormatError, FORMAT_VERSION, LIBRARY_MAGIC,
};
use crate::model::{LayerState, ModelConfig, SnapshotMeta, StateSnapshot};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("layer index {index} out of range, model has {layers} layers")]
    LayerOutOfRange { index: usize, layers: usize },
    #[error("vector length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("zero-norm vector carries no direction, similarity undefined")]
    ZeroNorm,
    #[error("library is empty")]
    EmptyLibrary,
    #[error("model hash mismatch: library {library:#x}, snapshot {snapshot:#x}")]
    HashMismatch { library: u64, snapshot: u64 },
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Which persisted tensor of a layer to flatten for similarity work.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum StateKind {
    #[default]
    Ssm,
    Conv,
}

impl std::str::FromStr for StateKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ssm" => Ok(StateKind::Ssm),
            "conv" => Ok(StateKind::Conv),
            other => Err(format!("unknown state kind {other:?}, want ssm|conv")),
        }
    }
}

/// A retrieval probe: flatten `query`'s chosen layer/kind and search.
#[derive(Debug, Clone)]
pub struct RetrievalQuery {
    pub query: StateSnapshot,
    pub layer_index: usize,
    pub state_kind: StateKind,
}

/// Mid-depth layer used for retrieval by default (intermediate layers carry
/// the task signal most reliably); 0-indexed.
pub fn default_retrieval_layer(config: &ModelConfig) -> usize {
    (config.num_layers + 1) / 2 - 1
}

/// Ordered, hash-guarded collection of labeled snapshots.
#[derive(Debug, Clone, PartialEq)]
pub struct SkillLibrary {
    pub config: ModelConfig,
    pub format_version: u32,
    entries: Vec<StateSnapshot>,
}

impl SkillLibrary {
    pub fn new(config: ModelConfig) -> Self {
        SkillLibrary {
            config,
            format_version: FORMAT_VERSION,
            entries: Vec::new(),
        }
    }

    pub fn model_hash(&self) -> u64 {
        self.config.stable_hash()
    }

    /// Append a snapshot; all entries must share the library's model hash.
    pub fn push(&mut self, snapshot: StateSnapshot) -> Result<(), StoreError> {
        if snapshot.meta.model_hash != self.model_hash() {
            return Err(StoreError::HashMismatch {
                library: self.model_hash(),
                snapshot: snapshot.meta.model_hash,
            });
        }
        self.entries.push(snapshot);
        Ok(())
    }

    pub fn entries(&self) -> &[StateSnapshot] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Row-major flattening of one layer tensor: ssm entry (d, n) lands at index
/// d*N + n; conv entry (w, d) lands at w*D + d (oldest slot first).
pub fn flatten_state(
    s: &StateSnapshot,
    layer_index: usize,
    kind: StateKind,
) -> Result<Vec<f32>, StoreError> {
    let layer = s
        .layers
        .get(layer_index)
        .ok_or(StoreError::LayerOutOfRange {
            index: layer_index,
            layers: s.layers.len(),
        })?;
    match kind {
        StateKind::Ssm => {
            // internal layout is n-major; emit (d, n) order
            let d = layer.channels;
            let n = layer.state_dim();
            let mut out = vec![0.0f32; layer.ssm.len()];
            for nn in 0..n {
                for dd in 0..d {
                    out[dd * n + nn] = layer.ssm[nn * d + dd];
                }
            }
            Ok(out)
        }
        StateKind::Conv => Ok(layer.conv_buf.clone()),
    }
}

/// u·v / (‖u‖‖v‖), accumulated in f64; clamped to [-1, 1].
pub fn cosine_similarity(u: &[f32], v: &[f32]) -> Result<f64, StoreError> {
    if u.len() != v.len() {
        return Err(StoreError::LengthMismatch(u.len(), v.len()));
    }
    let mut dot = 0.0f64;
    let mut nu = 0.0f64;
    let mut nv = 0.0f64;
    for (&a, &b) in u.iter().zip(v.iter()) {
        let (a, b) = (a as f64, b as f64);
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return Err(StoreError::ZeroNorm);
    }
    Ok((dot / (nu.sqrt() * nv.sqrt())).clamp(-1.0, 1.0))
}

/// Entry maximizing cosine similarity against the query's flattened layer
/// state; ties break to the lowest index.
pub fn retrieve_nearest(
    lib: &SkillLibrary,
    q: &RetrievalQuery,
) -> Result<(usize, f64), StoreError> {
    if lib.is_empty() {
        return Err(StoreError::EmptyLibrary);
    }
    if q.query.meta.model_hash != lib.model_hash() {
        return Err(StoreError::HashMismatch {
            library: lib.model_hash(),
            snapshot: q.query.meta.model_hash,
        });
    }
    let qv = flatten_state(&q.query, q.layer_index, q.state_kind)?;
    let mut best: Option<(usize, f64)> = None;
    for (i, entry) in lib.entries.iter().enumerate() {
        let ev = flatten_state(entry, q.layer_index, q.state_kind)?;
        let sim = cosine_similarity(&qv, &ev)?;
        match best {
            Some((_, s)) if sim <= s => {}
            _ => best = Some((i, sim)),
        }
    }
    Ok(best.expect("non-empty library"))
}

// ── persistence ──────────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
struct EntryHeader {
    task_label: String,
    shots: usize,
    token_count: usize,
    /// Byte offset of this entry's tensor block in the payload.
    offset: usize,
    /// Byte length of the tensor block.
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct LibraryHeader {
    format_version: u32,
    model_hash: u64,
    config: ModelConfig,
    entries: Vec<EntryHeader>,
}

/// Per entry, per layer: ssm (f32), conv_buf (f32), log_decay (f64).
fn entry_byte_len(config: &ModelConfig) -> usize {
    let dn = config.embed_dim * config.state_dim;
    let wd = config.conv_width * config.embed_dim;
    config.num_layers * (dn * 4 + wd * 4 + dn * 8)
}

pub fn save_library(lib: &SkillLibrary, path: &Path) -> Result<(), StoreError> {
    let mut payload = Vec::new();
    let mut entries = Vec::with_capacity(lib.len());
    for e in &lib.entries {
        let offset = payload.len();
        for layer in &e.layers {
            f32s_to_le_bytes(&layer.ssm, &mut payload);
            f32s_to_le_bytes(&layer.conv_buf, &mut payload);
            f64s_to_le_bytes(&layer.log_decay, &mut payload);
        }
        entries.push(EntryHeader {
            task_label: e.meta.task_label.clone(),
            shots: e.meta.shots,
            token_count: e.meta.token_count,
            offset,
            len: payload.len() - offset,
        });
    }
    let header = LibraryHeader {
        format_version: lib.format_version,
        model_hash: lib.model_hash(),
        config: lib.config.clone(),
        entries,
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| FormatError::Header(e.to_string()))?;
    let mut bytes = Vec::with_capacity(16 + header_json.len() + payload.len());
    bytes.extend_from_slice(LIBRARY_MAGIC);
    bytes.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    bytes.extend_from_slice(&payload);
    atomic_write(path, &bytes)?;
    Ok(())
}

pub fn load_library(path: &Path) -> Result<SkillLibrary, StoreError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let (header_json, payload) = decode_envelope(&bytes, LIBRARY_MAGIC)?;
    let header: LibraryHeader =
        serde_json::from_slice(header_json).map_err(|e| FormatError::Header(e.to_string()))?;
    if header.format_version != FORMAT_VERSION {
        return Err(FormatError::BadVersion(header.format_version).into());
    }
    if header.model_hash != header.config.stable_hash() {
        return Err(FormatError::Header(format!(
            "model hash {:#x} does not match config hash {:#x}",
            header.model_hash,
            header.config.stable_hash()
        ))
        .into());
    }
    let per_entry = entry_byte_len(&header.config);
    let expected: usize = header.entries.len() * per_entry;
    if payload.len() != expected {
        return Err(FormatError::Truncated {
            expected,
            actual: payload.len(),
        }
        .into());
    }

    let cfg = &header.config;
    let dn = cfg.embed_dim * cfg.state_dim;
    let wd = cfg.conv_width * cfg.embed_dim;
    let mut lib = SkillLibrary::new(cfg.clone());
    lib.format_version = header.format_version;
    for eh in &header.entries {
        if eh.len != per_entry || eh.offset + eh.len > payload.len() {
            return Err(FormatError::Truncated {
                expected: eh.offset + eh.len,
                actual: payload.len(),
            }
            .into());
        }
        let mut cursor = eh.offset;
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for _ in 0..cfg.num_layers {
            let ssm = f32s_from_le_bytes(&payload[cursor..cursor + dn * 4]);
            cursor += dn * 4;
            let conv_buf = f32s_from_le_bytes(&payload[cursor..cursor + wd * 4]);
            cursor += wd * 4;
            let log_decay = f64s_from_le_bytes(&payload[cursor..cursor + dn * 8]);
            cursor += dn * 8;
            layers.push(LayerState {
                ssm,
                conv_buf,
                log_decay,
                channels: cfg.embed_dim,
            });
        }
        lib.push(StateSnapshot {
            layers,
            meta: SnapshotMeta {
                task_label: eh.task_label.clone(),
                shots: eh.shots,
                token_count: eh.token_count,
                model_hash: header.model_hash,
            },
        })?;
    }
    Ok(lib)
}


/// Export flattened states as CSV for external projection tools. Returns the
/// number of data rows written. Float values use Rust's shortest round-trip
/// formatting, so a re-parse recovers the stored f32 exactly.
pub fn export_states_csv(
    lib: &SkillLibrary,
    layer_index: usize,
    kind: StateKind,
    path: &Path,
) -> Result<usize, StoreError> {
    let width = match kind {
        StateKind::Ssm => lib.config.embed_dim * lib.config.state_dim,
        StateKind::Conv => lib.config.conv_width * lib.config.embed_dim,
    };
    let mut out = String::new();
    out.push_str("task_label,shots,token_count");
    for i in 0..width {
        out.push_str(&format!(",v{i}"));
    }
    out.push('\n');
    for e in &lib.entries {
        let values = flatten_state(e, layer_index, kind)?;
        out.push_str(&format!(
            "{},{},{}",
            e.meta.task_label, e.meta.shots, e.meta.token_count
        ));
        for v in values {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())?;
    Ok(lib.len())
}
