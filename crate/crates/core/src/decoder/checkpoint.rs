//! Versioned checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes   "RDETCKPT"
//! version   u32
//! length    u64       byte length of the manifest
//! manifest  JSON      CheckpointManifest
//! blobs               each tensor's elements in manifest order,
//!                     row-major, as little-endian f32 or f64
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::DecoderError;
use crate::numerics::{DType, Params, Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RDETCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub dtype: String,
    pub seed: u64,
    pub sharing: String,
    pub iteration: u64,
    /// Free-form configuration echo.
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// Named tensors plus their manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub manifest: CheckpointManifest,
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    /// Snapshot of `params` followed by `extra` named tensors.
    pub fn from_params(
        params: &Params<T>,
        extra: Vec<(String, Tensor<T>)>,
        seed: u64,
        sharing: &str,
        iteration: u64,
        config: serde_json::Value,
    ) -> Self {
        let mut entries = Vec::new();
        let mut tensors = Vec::new();
        for (_, name, t) in params.iter() {
            entries.push(TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            });
            tensors.push(t.clone());
        }
        for (name, t) in extra {
            entries.push(TensorEntry {
                name,
                shape: t.shape().to_vec(),
            });
            tensors.push(t);
        }
        Self {
            manifest: CheckpointManifest {
                dtype: T::DTYPE.name().to_string(),
                seed,
                sharing: sharing.to_string(),
                iteration,
                config,
                tensors: entries,
            },
            tensors,
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.manifest
            .tensors
            .iter()
            .position(|e| e.name == name)
            .map(|i| &self.tensors[i])
    }

    /// Overwrites every parameter of `params` with the stored tensor of the
    /// same name and shape.
    pub fn restore_params(&self, params: &mut Params<T>) -> Result<(), DecoderError> {
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let name = params.name(id).to_string();
            let t = self
                .get(&name)
                .ok_or_else(|| DecoderError::Format(format!("missing parameter `{name}`")))?;
            params
                .set(id, t.clone())
                .map_err(|e| DecoderError::Format(format!("parameter `{name}`: {e}")))?;
        }
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<(), DecoderError> {
        let manifest = serde_json::to_vec(&self.manifest).map_err(|e| DecoderError::Format(e.to_string()))?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(manifest.len() as u64).to_le_bytes())?;
        w.write_all(&manifest)?;
        let mut buf = Vec::new();
        for t in &self.tensors {
            buf.clear();
            for &v in t.data() {
                v.write_le(&mut buf);
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, DecoderError> {
        let manifest = read_header(r)?;
        let dtype = DType::parse(&manifest.dtype).map_err(|e| DecoderError::Format(e.to_string()))?;
        if dtype != T::DTYPE {
            return Err(DecoderError::Format(format!(
                "checkpoint holds {} values, expected {}",
                dtype.name(),
                T::DTYPE.name()
            )));
        }
        let width = dtype.size_of();
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in &manifest.tensors {
            let count: usize = e.shape.iter().product();
            let mut bytes = vec![0u8; count * width];
            r.read_exact(&mut bytes)?;
            let data = bytes.chunks_exact(width).map(T::read_le).collect();
            let t = Tensor::new(&e.shape, data).map_err(|err| DecoderError::Format(format!("`{}`: {err}", e.name)))?;
            tensors.push(t);
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(DecoderError::Format("trailing bytes after last tensor".into()));
        }
        Ok(Self { manifest, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DecoderError> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DecoderError> {
        Self::read_from(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

impl CheckpointManifest {
    /// Reads only the manifest of a checkpoint file, e.g. to learn its dtype.
    pub fn peek(path: impl AsRef<Path>) -> Result<Self, DecoderError> {
        read_header(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

fn read_header(r: &mut impl Read) -> Result<CheckpointManifest, DecoderError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(DecoderError::Format("bad magic".into()));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != CHECKPOINT_VERSION {
        return Err(DecoderError::Format(format!("unsupported version {version}")));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let mut manifest = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut manifest)?;
    serde_json::from_slice(&manifest).map_err(|e| DecoderError::Format(format!("manifest: {e}")))
}
