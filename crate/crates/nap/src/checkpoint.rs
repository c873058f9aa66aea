//! Checkpoint format: a length-prefixed JSON header followed by raw
//! little-endian `f32` parameter payload in header order.
//!
//! Layout: 8-byte little-endian header length, the JSON header, then the
//! payload. Optimizer moments are stored alongside the model parameters so
//! interrupted runs resume with the full optimizer state.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::architecture::{ModelConfig, ModelParams};
use crate::diffcore::Array;
use crate::trainer::{AdamState, TrainMode};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("unsupported checkpoint version {found} (this build supports {CHECKPOINT_VERSION})")]
    VersionMismatch { found: u32 },
    #[error("payload length mismatch: header implies {expected} bytes, found {found}")]
    PayloadLengthMismatch { expected: usize, found: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub mode: TrainMode,
    pub model: ModelConfig,
    /// Storage precision of the payload; always "f32" in this version.
    pub precision: String,
    pub iteration: usize,
    pub seed: u64,
    /// Digest of the deterministic rng schedule position.
    pub rng_digest: String,
    pub adam_step: Option<u64>,
    /// Payload tensors in order: model parameters, then optimizer moments.
    pub tensors: Vec<TensorEntry>,
}

/// In-memory checkpoint contents.
pub struct Checkpoint {
    pub mode: TrainMode,
    pub iteration: usize,
    pub seed: u64,
    pub params: ModelParams,
    pub adam: Option<AdamState>,
}

fn rng_digest(seed: u64, iteration: usize) -> String {
    // FNV-1a over the schedule position
    let mut h: u64 = 0xcbf29ce484222325;
    for b in seed
        .to_le_bytes()
        .iter()
        .chain((iteration as u64).to_le_bytes().iter())
    {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    format!("{h:016x}")
}

pub fn save(ckpt: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    let io_err = |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut tensors = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let mut push = |name: String, arr: &Array, tensors: &mut Vec<TensorEntry>| {
        tensors.push(TensorEntry {
            name,
            shape: arr.shape().to_vec(),
        });
        for v in arr.data() {
            payload.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    };
    for (name, arr) in ckpt.params.iter() {
        push(name.to_string(), arr, &mut tensors);
    }
    if let Some(adam) = &ckpt.adam {
        for (name, arr) in &adam.m {
            push(format!("adam.m.{name}"), arr, &mut tensors);
        }
        for (name, arr) in &adam.v {
            push(format!("adam.v.{name}"), arr, &mut tensors);
        }
    }
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        mode: ckpt.mode,
        model: ckpt.params.config().clone(),
        precision: "f32".to_string(),
        iteration: ckpt.iteration,
        seed: ckpt.seed,
        rng_digest: rng_digest(ckpt.seed, ckpt.iteration),
        adam_step: ckpt.adam.as_ref().map(|a| a.step),
        tensors,
    };
    let header_bytes = serde_json::to_vec(&header).expect("header serializes");
    let mut file = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    file.write_all(&(header_bytes.len() as u64).to_le_bytes())
        .map_err(io_err)?;
    file.write_all(&header_bytes).map_err(io_err)?;
    file.write_all(&payload).map_err(io_err)?;
    file.flush().map_err(io_err)?;
    Ok(())
}

pub fn read_header(path: &Path) -> Result<(CheckpointHeader, Vec<u8>), CheckpointError> {
    let io_err = |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut file = std::io::BufReader::new(std::fs::File::open(path).map_err(io_err)?);
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)
        .map_err(|_| CheckpointError::Corrupt("file shorter than the length prefix".into()))?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)
        .map_err(|_| CheckpointError::Corrupt("truncated header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| CheckpointError::Corrupt(format!("header JSON: {e}")))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: header.version,
        });
    }
    if header.precision != "f32" {
        return Err(CheckpointError::Corrupt(format!(
            "unsupported precision `{}`",
            header.precision
        )));
    }
    let mut payload = Vec::new();
    file.read_to_end(&mut payload).map_err(io_err)?;
    let expected: usize = header
        .tensors
        .iter()
        .map(|t| 4 * t.shape.iter().product::<usize>())
        .sum();
    if payload.len() != expected {
        return Err(CheckpointError::PayloadLengthMismatch {
            expected,
            found: payload.len(),
        });
    }
    Ok((header, payload))
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let (header, payload) = read_header(path)?;
    let mut offset = 0usize;
    let mut arrays: BTreeMap<String, Array> = BTreeMap::new();
    let mut adam_m: BTreeMap<String, Array> = BTreeMap::new();
    let mut adam_v: BTreeMap<String, Array> = BTreeMap::new();
    for entry in &header.tensors {
        let count: usize = entry.shape.iter().product();
        let mut arr = Array::zeros(&entry.shape);
        for i in 0..count {
            let mut b = [0u8; 4];
            b.copy_from_slice(&payload[offset + 4 * i..offset + 4 * i + 4]);
            arr.data_mut()[i] = f32::from_le_bytes(b) as f64;
        }
        offset += 4 * count;
        if let Some(rest) = entry.name.strip_prefix("adam.m.") {
            adam_m.insert(rest.to_string(), arr);
        } else if let Some(rest) = entry.name.strip_prefix("adam.v.") {
            adam_v.insert(rest.to_string(), arr);
        } else {
            arrays.insert(entry.name.clone(), arr);
        }
    }
    let params = ModelParams::from_arrays(header.model.clone(), arrays)
        .map_err(CheckpointError::Corrupt)?;
    let adam = header.adam_step.map(|step| AdamState {
        m: adam_m,
        v: adam_v,
        step,
    });
    if let Some(adam) = &adam {
        if adam.m.len() != params.iter().count() || adam.v.len() != params.iter().count() {
            return Err(CheckpointError::Corrupt(
                "optimizer state does not cover all parameters".into(),
            ));
        }
    }
    Ok(Checkpoint {
        mode: header.mode,
        iteration: header.iteration,
        seed: header.seed,
        params,
        adam,
    })
}
