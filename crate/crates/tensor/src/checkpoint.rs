//! Named-tensor checkpoints: `manifest.json` plus a raw `weights.bin` blob of
//! little-endian `f32` values.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const DTYPE_F32LE: &str = "f32le";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint manifest: {0}")]
    Json(#[from] serde_json::Error),
    #[error("checkpoint entry `{name}`: {msg}")]
    Entry { name: String, msg: String },
    #[error("checkpoint is missing tensor `{0}`")]
    Missing(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub len_bytes: u64,
}

/// Ordered list of named `f32` tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_params<T: Scalar>(params: &ParamStore<T>) -> Self {
        let mut ck = Self::new();
        ck.extend_params(params);
        ck
    }

    pub fn extend_params<T: Scalar>(&mut self, params: &ParamStore<T>) {
        for (name, t) in params.iter() {
            self.push(name, t);
        }
    }

    pub fn push<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.tensors.push((name.into(), t.cast()));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Overwrites every parameter in `params` with the stored tensor of the same name.
    pub fn restore_params<T: Scalar>(&self, params: &mut ParamStore<T>) -> Result<(), CheckpointError> {
        let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
        for name in names {
            let t = self.get(&name).ok_or_else(|| CheckpointError::Missing(name.clone()))?;
            params.set_value(&name, t.cast()).map_err(|e| CheckpointError::Entry {
                name: name.clone(),
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn manifest(&self) -> Vec<ManifestEntry> {
        let mut offset = 0u64;
        self.tensors
            .iter()
            .map(|(name, t)| {
                let len_bytes = (t.len() * 4) as u64;
                let e = ManifestEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    dtype: DTYPE_F32LE.to_string(),
                    offset,
                    len_bytes,
                };
                offset += len_bytes;
                e
            })
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<(), CheckpointError> {
        fs::create_dir_all(dir)?;
        let manifest = self.manifest();
        let total: usize = self.tensors.iter().map(|(_, t)| t.len() * 4).sum();
        let mut blob = Vec::with_capacity(total);
        for (_, t) in &self.tensors {
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(dir.join(WEIGHTS_FILE), blob)?;
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, CheckpointError> {
        let manifest: Vec<ManifestEntry> =
            serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
        let blob = fs::read(dir.join(WEIGHTS_FILE))?;
        let mut tensors = Vec::with_capacity(manifest.len());
        for e in manifest {
            let bad = |msg: String| CheckpointError::Entry {
                name: e.name.clone(),
                msg,
            };
            if e.dtype != DTYPE_F32LE {
                return Err(bad(format!("unsupported dtype {}", e.dtype)));
            }
            let count: usize = e.shape.iter().product();
            if e.len_bytes != (count * 4) as u64 {
                return Err(bad(format!("len_bytes {} does not match shape {:?}", e.len_bytes, e.shape)));
            }
            let start = e.offset as usize;
            let end = start + e.len_bytes as usize;
            let bytes = blob
                .get(start..end)
                .ok_or_else(|| bad(format!("range {start}..{end} exceeds weights.bin ({} bytes)", blob.len())))?;
            let data = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            let t = Tensor::new(&e.shape, data).map_err(|err| bad(err.to_string()))?;
            tensors.push((e.name, t));
        }
        Ok(Self { tensors })
    }
}
