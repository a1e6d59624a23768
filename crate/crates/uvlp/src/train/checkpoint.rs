//! Checkpoint persistence.
//!
//! A checkpoint is a single file: the magic line `UVLP1`, one line of JSON
//! manifest (format version, step, model config, optional answer vocabulary,
//! and the name/shape/offset of every tensor), then the raw payload — every
//! tensor's data as little-endian 64-bit reals, concatenated in manifest
//! order. Offsets are in units of one real. The manifest is the source of
//! truth on load: tensors are matched by name against a freshly constructed
//! model, so a corrupted or hand-edited file fails loudly instead of loading
//! skewed weights.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ModelWeights;
use crate::data::AnswerVocab;
use crate::model::ModelConfig;

/// Leading bytes of every checkpoint file.
pub const MAGIC: &[u8] = b"UVLP1\n";
/// Manifest format version this build reads and writes.
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug)]
pub enum CheckpointError {
    /// The file is not a checkpoint this build understands (bad magic or
    /// unsupported manifest version).
    VersionMismatch { found: String },
    /// The payload ends before the manifest says it should.
    Truncated { expected_bytes: u64, found_bytes: u64 },
    /// A manifest tensor's shape disagrees with the model built from the
    /// manifest's own config.
    ShapeMismatch { name: String },
    /// Structurally broken manifest (unparseable JSON, unknown tensor
    /// names, missing tensors, overlapping or trailing payload).
    Malformed { message: String },
    Io { path: PathBuf, source: std::io::Error },
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::VersionMismatch { found } => {
                write!(f, "not a supported checkpoint: {found}")
            }
            CheckpointError::Truncated {
                expected_bytes,
                found_bytes,
            } => write!(
                f,
                "checkpoint payload truncated: expected {expected_bytes} bytes, found {found_bytes}"
            ),
            CheckpointError::ShapeMismatch { name } => {
                write!(f, "checkpoint tensor `{name}` has a mismatched shape")
            }
            CheckpointError::Malformed { message } => {
                write!(f, "malformed checkpoint: {message}")
            }
            CheckpointError::Io { path, source } => {
                write!(f, "checkpoint io error at {}: {source}", path.display())
            }
        }
    }
}

impl std::error::Error for CheckpointError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            CheckpointError::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    step: u64,
    config: ModelConfig,
    answers: Option<AnswerVocab>,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Start of this tensor in the payload, in units of one 64-bit real.
    offset: u64,
}

/// A checkpoint read back from disk.
pub struct LoadedCheckpoint {
    pub weights: ModelWeights,
    pub step: u64,
    pub answers: Option<AnswerVocab>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `weights` (plus step and optional answer vocabulary) to `path`.
/// The file is assembled in a sibling temporary file and renamed into
/// place, so readers never observe a half-written checkpoint.
pub fn save_checkpoint(
    weights: &ModelWeights,
    step: u64,
    answers: Option<&AnswerVocab>,
    path: &Path,
) -> Result<(), CheckpointError> {
    let mut tensors = Vec::new();
    let mut offset = 0u64;
    for (name, t) in weights.store.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.numel() as u64;
    }
    let manifest = Manifest {
        version: FORMAT_VERSION,
        step,
        config: weights.config.clone(),
        answers: answers.cloned(),
        tensors,
    };
    let manifest_line = serde_json::to_string(&manifest)
        .map_err(|e| CheckpointError::Malformed {
            message: format!("manifest serialization failed: {e}"),
        })?;

    let tmp = path.with_extension("tmp");
    {
        let file = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        let mut out = std::io::BufWriter::new(file);
        out.write_all(MAGIC).map_err(io_err(&tmp))?;
        out.write_all(manifest_line.as_bytes()).map_err(io_err(&tmp))?;
        out.write_all(b"\n").map_err(io_err(&tmp))?;
        for (_, t) in weights.store.iter() {
            for v in t.data() {
                out.write_all(&v.to_le_bytes()).map_err(io_err(&tmp))?;
            }
        }
        out.flush().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Reads a checkpoint back. The model is rebuilt from the manifest's config
/// (heads included, detected by tensor name) and every tensor is overwritten
/// from the payload, so `load(save(w))` reproduces `w` bit for bit.
pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint, CheckpointError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        let head = bytes[..bytes.len().min(MAGIC.len())].to_vec();
        return Err(CheckpointError::VersionMismatch {
            found: format!("leading bytes {:?}", String::from_utf8_lossy(&head)),
        });
    }
    let rest = &bytes[MAGIC.len()..];
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| CheckpointError::Malformed {
            message: "manifest line not terminated".into(),
        })?;
    let manifest: Manifest =
        serde_json::from_slice(&rest[..nl]).map_err(|e| CheckpointError::Malformed {
            message: format!("manifest parse failed: {e}"),
        })?;
    if manifest.version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: format!("manifest version {}", manifest.version),
        });
    }
    manifest
        .config
        .validate()
        .map_err(|e| CheckpointError::Malformed {
            message: e.to_string(),
        })?;

    // Rebuild the parameter skeleton the manifest describes; initial values
    // are irrelevant because every tensor is overwritten below.
    let mut weights =
        ModelWeights::init(&manifest.config, 0).map_err(|e| CheckpointError::Malformed {
            message: e.to_string(),
        })?;
    if let Some(entry) = manifest.tensors.iter().find(|t| t.name == "vqa.w2") {
        let k = *entry.shape.first().ok_or_else(|| CheckpointError::ShapeMismatch {
            name: entry.name.clone(),
        })?;
        weights.attach_vqa_head(k, 0);
    }
    if manifest.tensors.iter().any(|t| t.name == "pretext.w") {
        weights.attach_pretext_head(0);
    }

    // Shape validation happens before any payload bounds check so a
    // hand-edited shape is reported as such rather than as truncation.
    for entry in &manifest.tensors {
        let id = weights
            .store
            .find(&entry.name)
            .ok_or_else(|| CheckpointError::Malformed {
                message: format!("unknown tensor `{}` in manifest", entry.name),
            })?;
        if weights.store.get(id).shape() != entry.shape.as_slice() {
            return Err(CheckpointError::ShapeMismatch {
                name: entry.name.clone(),
            });
        }
    }
    if manifest.tensors.len() != weights.store.len() {
        return Err(CheckpointError::Malformed {
            message: format!(
                "manifest lists {} tensors but the model has {}",
                manifest.tensors.len(),
                weights.store.len()
            ),
        });
    }

    let payload = &rest[nl + 1..];
    let total: u64 = manifest
        .tensors
        .iter()
        .map(|e| e.shape.iter().product::<usize>() as u64)
        .sum();
    let expected_bytes = total * 8;
    if (payload.len() as u64) < expected_bytes {
        return Err(CheckpointError::Truncated {
            expected_bytes,
            found_bytes: payload.len() as u64,
        });
    }
    if payload.len() as u64 > expected_bytes {
        return Err(CheckpointError::Malformed {
            message: format!(
                "payload carries {} trailing bytes",
                payload.len() as u64 - expected_bytes
            ),
        });
    }

    for entry in &manifest.tensors {
        let id = weights.store.find(&entry.name).expect("validated above");
        let numel: usize = entry.shape.iter().product();
        let start = entry.offset as usize * 8;
        let end = start + numel * 8;
        if end > payload.len() {
            return Err(CheckpointError::Truncated {
                expected_bytes: end as u64,
                found_bytes: payload.len() as u64,
            });
        }
        let dst = weights.store.get_mut(id).data_mut();
        for (i, chunk) in payload[start..end].chunks_exact(8).enumerate() {
            dst[i] = f64::from_le_bytes(chunk.try_into().expect("chunk of 8"));
        }
    }

    Ok(LoadedCheckpoint {
        weights,
        step: manifest.step,
        answers: manifest.answers,
    })
}
