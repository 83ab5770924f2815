//! Named parameter storage and the checkpoint file format.
//!
//! Parameters live in insertion order; that order is the manifest order and
//! fixes the checkpoint blob layout, so construction must register
//! parameters deterministically. The checkpoint file is a single JSON
//! header line (config + manifest) followed by the raw little-endian f64
//! blob holding every parameter in manifest order.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use panofuse_tensor::{Scalar, Tensor};

use crate::{CoreError, Result};

/// Handle to one registered parameter; indexes are stable for the life of
/// the store.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// Initialization scheme for a freshly registered parameter.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Normal with std sqrt(2 / fan_in); the default for conv and linear
    /// weights feeding rectifier-family nonlinearities.
    HeNormal { fan_in: usize },
    /// For biases, norm shifts, and every offset predictor (offset
    /// predictors must start at zero so deformable ops begin as their
    /// rigid counterparts).
    Zeros,
    /// For norm gains.
    Ones,
}

pub struct ParamStore<T: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(CoreError::invalid(
                "ParamStore::register",
                format!("duplicate parameter name {name}"),
            ));
        }
        let tensor = match init {
            Init::HeNormal { fan_in } => {
                if fan_in == 0 {
                    return Err(CoreError::invalid(
                        "ParamStore::register",
                        format!("{name}: zero fan_in"),
                    ));
                }
                let std = (2.0 / fan_in as f64).sqrt();
                Tensor::<T>::randn(shape, std, rng)
            }
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, T::ONE),
        };
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id.0);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_index(&self, index: usize) -> &Tensor<T> {
        &self.tensors[index]
    }

    pub fn get_index_mut(&mut self, index: usize) -> &mut Tensor<T> {
        &mut self.tensors[index]
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter())
    }

    pub fn manifest(&self) -> Vec<ManifestEntry> {
        self.iter()
            .map(|(name, t)| ManifestEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect()
    }

    pub fn total_params(&self) -> u64 {
        self.tensors.iter().map(|t| t.numel() as u64).sum()
    }

    /// Replaces every parameter with checkpoint values. The checkpoint
    /// manifest must match this store's registration exactly (same names,
    /// same shapes, same order); a mismatch means the checkpoint belongs
    /// to a different architecture.
    pub fn load_values(&mut self, ck: &CheckpointData) -> Result<()> {
        if ck.manifest.len() != self.len() {
            return Err(CoreError::mismatch(
                "ParamStore::load_values",
                format!(
                    "checkpoint has {} parameters, model has {}",
                    ck.manifest.len(),
                    self.len()
                ),
            ));
        }
        let mut offset = 0usize;
        for (i, entry) in ck.manifest.iter().enumerate() {
            if entry.name != self.names[i] || entry.shape != self.tensors[i].shape() {
                return Err(CoreError::mismatch(
                    "ParamStore::load_values",
                    format!(
                        "parameter {i}: checkpoint has {} {:?}, model has {} {:?}",
                        entry.name,
                        entry.shape,
                        self.names[i],
                        self.tensors[i].shape()
                    ),
                ));
            }
            let n = self.tensors[i].numel();
            let values = &ck.values[offset..offset + n];
            for (dst, &src) in self.tensors[i].data_mut().iter_mut().zip(values) {
                *dst = T::from_f64(src);
            }
            offset += n;
        }
        Ok(())
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore::new()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    config: serde_json::Value,
    manifest: Vec<ManifestEntry>,
}

const CHECKPOINT_FORMAT: &str = "panofuse-checkpoint-v1";

/// Parsed checkpoint: the embedded config, the manifest, and all parameter
/// values concatenated in manifest order.
pub struct CheckpointData {
    pub config: serde_json::Value,
    pub manifest: Vec<ManifestEntry>,
    pub values: Vec<f64>,
}

pub fn write_checkpoint<T: Scalar>(
    path: &Path,
    config: &serde_json::Value,
    store: &ParamStore<T>,
) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| CoreError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.to_string(),
        config: config.clone(),
        manifest: store.manifest(),
    };
    let mut line = serde_json::to_string(&header)?;
    line.push('\n');
    w.write_all(line.as_bytes())
        .map_err(|e| CoreError::io(path, e))?;
    for (_, tensor) in store.iter() {
        for v in tensor.data() {
            w.write_all(&v.to_f64().to_le_bytes())
                .map_err(|e| CoreError::io(path, e))?;
        }
    }
    w.flush().map_err(|e| CoreError::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<CheckpointData> {
    let file = std::fs::File::open(path).map_err(|e| CoreError::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut line = String::new();
    r.read_line(&mut line).map_err(|e| CoreError::io(path, e))?;
    let header: CheckpointHeader = serde_json::from_str(line.trim_end())?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(CoreError::invalid(
            "read_checkpoint",
            format!("unrecognized format tag {}", header.format),
        ));
    }
    let total: usize = header.manifest.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    let mut blob = vec![0u8; total * 8];
    r.read_exact(&mut blob).map_err(|e| CoreError::io(path, e))?;
    let mut trailing = [0u8; 1];
    match r.read(&mut trailing) {
        Ok(0) => {}
        Ok(_) => {
            return Err(CoreError::invalid(
                "read_checkpoint",
                "trailing bytes after parameter blob",
            ));
        }
        Err(e) => return Err(CoreError::io(path, e)),
    }
    let values = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk is 8 bytes")))
        .collect();
    Ok(CheckpointData {
        config: header.config,
        manifest: header.manifest,
        values,
    })
}
