//! Versioned checkpoint files.
//!
//! Layout: the 8-byte magic `HSEGCKPT`, a little-endian `u32` format
//! version, a little-endian `u64` metadata length, the metadata as JSON,
//! then every tensor listed in the metadata as little-endian `f32` values in
//! listed order. Files are written to a temporary sibling and renamed into
//! place, so readers never observe a partial checkpoint.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::remap::ChannelRemap;
use crate::error::{Error, Result};
use crate::models::{Model, ModelSpec};
use crate::registry::ModalityRegistry;
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 8] = b"HSEGCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 5],
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub spec: ModelSpec,
    /// Last completed epoch.
    pub epoch: usize,
    /// Optimizer steps taken.
    pub step: usize,
    /// SHA-256 of the resolved training configuration.
    pub config_hash: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation_dice: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub remap: Option<ChannelRemap>,
    /// Free-form provenance (source checkpoint, fine-tuning mode, ...).
    #[serde(default)]
    pub provenance: BTreeMap<String, String>,
    pub tensors: Vec<TensorEntry>,
}

/// Model weights plus training provenance.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: Model<f32>,
}

impl Checkpoint {
    pub fn new(
        model: Model<f32>,
        epoch: usize,
        step: usize,
        config_hash: String,
        seed: u64,
    ) -> Self {
        let tensors = model
            .store
            .iter()
            .map(|(_, p)| TensorEntry {
                name: p.name.clone(),
                shape: p.value.shape().0,
                trainable: p.trainable,
            })
            .collect();
        Checkpoint {
            meta: CheckpointMeta {
                format_version: FORMAT_VERSION,
                spec: model.spec.clone(),
                epoch,
                step,
                config_hash,
                seed,
                validation_dice: None,
                remap: None,
                provenance: BTreeMap::new(),
                tensors,
            },
            model,
        }
    }

    pub fn registry(&self) -> &ModalityRegistry {
        &self.model.spec.registry
    }

    /// Rejects use with a registry of a different size; a remap is needed
    /// to move weights between registries.
    pub fn expect_registry(&self, registry: &ModalityRegistry) -> Result<()> {
        if self.registry().len() != registry.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} input channels ({:?}), data registry has {} ({:?}); use the remap path",
                self.registry().len(),
                self.registry().names(),
                registry.len(),
                registry.names()
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::with_capacity(20 + meta.len() + 4 * self.model.num_parameters());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        for entry in &self.meta.tensors {
            let id =
                self.model.store.find(&entry.name).ok_or_else(|| {
                    Error::Checkpoint(format!("parameter `{}` missing", entry.name))
                })?;
            for v in self.model.store.get(id).value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Checkpoint("truncated header".into()))?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)
            .map_err(|_| Error::Checkpoint("truncated header".into()))?;
        let version = u32::from_le_bytes(word);
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)
            .map_err(|_| Error::Checkpoint("truncated header".into()))?;
        let len = u64::from_le_bytes(len) as usize;
        if r.len() < len {
            return Err(Error::Checkpoint("truncated metadata".into()));
        }
        let meta: CheckpointMeta = serde_json::from_slice(&r[..len])?;
        r = &r[len..];
        let mut model = Model::<f32>::new(meta.spec.clone(), 0)?;
        if model.store.len() != meta.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint lists {} tensors, architecture has {}",
                meta.tensors.len(),
                model.store.len()
            )));
        }
        for entry in &meta.tensors {
            let id = model.store.find(&entry.name).ok_or_else(|| {
                Error::Checkpoint(format!("unexpected parameter `{}`", entry.name))
            })?;
            let shape = Shape(entry.shape);
            if model.store.get(id).value.shape() != shape {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` has shape {shape}",
                    entry.name
                )));
            }
            let n = shape.len() * 4;
            if r.len() < n {
                return Err(Error::Checkpoint("truncated tensor data".into()));
            }
            let data = r[..n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            r = &r[n..];
            let p = model.store.get_mut(id);
            p.value = Tensor::from_vec(shape, data);
            p.trainable = entry.trainable;
        }
        if !r.is_empty() {
            return Err(Error::Checkpoint("trailing bytes after tensor data".into()));
        }
        Ok(Checkpoint { meta, model })
    }

    /// Atomically writes the checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = std::path::PathBuf::from(tmp);
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_bytes(&std::fs::read(path)?)
    }
}
