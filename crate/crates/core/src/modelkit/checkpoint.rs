//! safetensors checkpoints.
//!
//! Pretrained backbones are read by parameter name, so torchvision/timm
//! state dicts exported to safetensors load directly; extra entries (the
//! original 1000-way classifier, `num_batches_tracked`) are ignored.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use sha2::{Digest, Sha256};

use super::tensor::Param;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, StoredTensor>,
    pub metadata: BTreeMap<String, String>,
}

fn ck_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("{}: {e}", path.display()))
}

impl Checkpoint {
    pub fn from_params<'a>(
        params: impl IntoIterator<Item = &'a Param>,
        metadata: BTreeMap<String, String>,
    ) -> Self {
        let tensors = params
            .into_iter()
            .map(|p| {
                (
                    p.name.clone(),
                    StoredTensor {
                        shape: p.shape.clone(),
                        values: p.value.clone(),
                    },
                )
            })
            .collect();
        Self { tensors, metadata }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| ck_err(path, e))
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let (_, meta) = SafeTensors::read_metadata(bytes).map_err(|e| e.to_string())?;
        let metadata = meta
            .metadata()
            .as_ref()
            .map(|m| m.iter().map(|(k, v)| (k.clone(), v.clone())).collect())
            .unwrap_or_default();
        let st = SafeTensors::deserialize(bytes).map_err(|e| e.to_string())?;
        let mut tensors = BTreeMap::new();
        for (name, view) in st.iter() {
            let values: Vec<f32> = match view.dtype() {
                Dtype::F32 => view
                    .data()
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect(),
                Dtype::F64 => view
                    .data()
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")) as f32)
                    .collect(),
                // integer bookkeeping such as num_batches_tracked
                Dtype::I64 | Dtype::I32 | Dtype::U8 | Dtype::BOOL => continue,
                other => return Err(format!("tensor {name}: unsupported dtype {other:?}")),
            };
            tensors.insert(
                name.to_string(),
                StoredTensor {
                    shape: view.shape().to_vec(),
                    values,
                },
            );
        }
        Ok(Self { tensors, metadata })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let raw: Vec<(&String, &StoredTensor, Vec<u8>)> = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let bytes = t.values.iter().flat_map(|v| v.to_le_bytes()).collect();
                (k, t, bytes)
            })
            .collect();
        let views = raw
            .iter()
            .map(|(k, t, bytes)| {
                TensorView::new(Dtype::F32, t.shape.clone(), bytes)
                    .map(|v| (k.as_str(), v))
                    .map_err(|e| Error::Checkpoint(format!("tensor {k}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let meta: HashMap<String, String> = self
            .metadata
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        safetensors::serialize(views, (!meta.is_empty()).then_some(meta))
            .map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// Copies stored values into `params` by name. Every param must be
    /// present with a matching shape.
    pub fn apply(&self, params: &mut [&mut Param]) -> Result<()> {
        for p in params.iter_mut() {
            let t = self.tensors.get(&p.name).ok_or_else(|| {
                Error::Checkpoint(format!("missing tensor {}", p.name))
            })?;
            if t.shape != p.shape {
                return Err(Error::Checkpoint(format!(
                    "tensor {}: shape {:?} in checkpoint, model expects {:?}",
                    p.name, t.shape, p.shape
                )));
            }
            p.value.copy_from_slice(&t.values);
        }
        Ok(())
    }
}

/// Hex sha256 of a file's bytes.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
