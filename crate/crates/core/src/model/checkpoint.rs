//! Binary tensor container used for model checkpoints and vector sidecars.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "EDGELAB\0"
//! version  u32      FORMAT_VERSION
//! kind     u32      0 = model checkpoint, 1 = vector sidecar
//! mlen     u64      manifest length in bytes
//! manifest mlen     UTF-8 JSON: { config, step, seed, tensors: [{name, shape}], extra }
//! payload           f64 LE values of every tensor, in manifest order
//! ```

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ParamStore};
use crate::nncore::Tensor;

pub const MAGIC: &[u8; 8] = b"EDGELAB\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported format version {0}")]
    Version(u32),
    #[error("expected file kind {expected:?}, found {found}")]
    Kind { expected: FileKind, found: u32 },
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("payload truncated or oversized")]
    Payload,
    #[error("checkpoint does not match model config: {0}")]
    Mismatch(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FileKind {
    Model = 0,
    Vectors = 1,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Weight-decay flag (model checkpoints only).
    #[serde(default)]
    pub decay: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub config: Option<ModelConfig>,
    pub step: usize,
    pub seed: u64,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

/// Manifest plus tensors in manifest order.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorFile {
    pub kind: FileKind,
    pub manifest: Manifest,
    pub tensors: Vec<Tensor>,
}

impl TensorFile {
    pub fn write_to(&self, w: &mut impl Write) -> Result<(), CheckpointError> {
        let manifest = serde_json::to_vec(&self.manifest)?;
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.kind as u32).to_le_bytes())?;
        w.write_all(&(manifest.len() as u64).to_le_bytes())?;
        w.write_all(&manifest)?;
        let mut buf = Vec::with_capacity(self.tensors.iter().map(|t| t.len() * 8).sum());
        for t in &self.tensors {
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read, expected: FileKind) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut u4 = [0u8; 4];
        r.read_exact(&mut u4)?;
        let version = u32::from_le_bytes(u4);
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        r.read_exact(&mut u4)?;
        let kind = u32::from_le_bytes(u4);
        if kind != expected as u32 {
            return Err(CheckpointError::Kind { expected, found: kind });
        }
        let mut u8b = [0u8; 8];
        r.read_exact(&mut u8b)?;
        let mlen = u64::from_le_bytes(u8b) as usize;
        let mut mbuf = vec![0u8; mlen];
        r.read_exact(&mut mbuf)?;
        let manifest: Manifest = serde_json::from_slice(&mbuf)?;
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        let total: usize = manifest.tensors.iter().map(|e| e.shape.iter().product::<usize>()).sum();
        if payload.len() != total * 8 {
            return Err(CheckpointError::Payload);
        }
        let mut off = 0;
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in &manifest.tensors {
            let n: usize = e.shape.iter().product();
            let data = payload[off..off + n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            off += n * 8;
            tensors.push(Tensor::new(e.shape.clone(), data).map_err(|_| CheckpointError::Payload)?);
        }
        Ok(Self {
            kind: expected,
            manifest,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut f = io::BufWriter::new(fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path, expected: FileKind) -> Result<Self, CheckpointError> {
        let mut f = io::BufReader::new(fs::File::open(path)?);
        Self::read_from(&mut f, expected)
    }
}

/// A model snapshot at some training step.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub step: usize,
    pub seed: u64,
    pub extra: serde_json::Value,
}

impl Checkpoint {
    pub fn to_file(&self) -> TensorFile {
        TensorFile {
            kind: FileKind::Model,
            manifest: Manifest {
                config: Some(self.model.config.clone()),
                step: self.step,
                seed: self.seed,
                tensors: self
                    .model
                    .params
                    .iter()
                    .map(|p| TensorEntry {
                        name: p.name.clone(),
                        shape: p.value.shape().to_vec(),
                        decay: p.decay,
                    })
                    .collect(),
                extra: self.extra.clone(),
            },
            tensors: self.model.params.iter().map(|p| p.value.clone()).collect(),
        }
    }

    pub fn from_file(file: TensorFile) -> Result<Self, CheckpointError> {
        let config = file
            .manifest
            .config
            .ok_or_else(|| CheckpointError::Mismatch("manifest has no model config".into()))?;
        let mut params = ParamStore::default();
        for (e, t) in file.manifest.tensors.into_iter().zip(file.tensors) {
            params.push(e.name, t, e.decay);
        }
        let model = Model { config, params };
        // the parameter table must be exactly what `build` produces
        let fresh = Model::build(model.config.clone(), 0).map_err(|e| CheckpointError::Mismatch(e.to_string()))?;
        let same_layout = fresh.params.len() == model.params.len()
            && fresh
                .params
                .iter()
                .zip(model.params.iter())
                .all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape());
        if !same_layout {
            return Err(CheckpointError::Mismatch("parameter table differs from config".into()));
        }
        Ok(Self {
            model,
            step: file.manifest.step,
            seed: file.manifest.seed,
            extra: file.manifest.extra,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        self.to_file().save(path)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_file(TensorFile::load(path, FileKind::Model)?)
    }
}
