//! Named-tensor snapshots on disk.
//!
//! A snapshot directory holds one raw little-endian file per tensor
//! (`<name>.bin`, row-major, no header) plus `manifest.json`:
//!
//! ```json
//! { "format": "sambay-tensors", "version": 1, "dtype": "f32",
//!   "tensors": [ { "name": "layers.0.mixer_norm.weight", "shape": [128], "file": "layers.0.mixer_norm.weight.bin" } ],
//!   "meta": { ... } }
//! ```
//!
//! Names may contain dots; they map one-to-one to file stems.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DType, Float, Tensor};
use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.json";
const FORMAT: &str = "sambay-tensors";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub dtype: DType,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'))
}

/// Write `tensors` and a manifest into `dir` (created if missing).
pub fn save<T: Float>(
    dir: &Path,
    tensors: &[(String, &Tensor<T>)],
    meta: serde_json::Value,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        if !valid_name(name) {
            return Err(Error::Format {
                what: "tensor name",
                detail: name.clone(),
            });
        }
        let file = format!("{name}.bin");
        let mut bytes = Vec::with_capacity(t.numel() * T::DTYPE.size_of());
        for &v in t.data() {
            v.extend_le_bytes(&mut bytes);
        }
        let path = dir.join(&file);
        fs::write(&path, bytes).map_err(|e| Error::io(path, e))?;
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            file,
        });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: 1,
        dtype: T::DTYPE,
        tensors: entries,
        meta,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    fs::write(&path, text).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format {
        what: "manifest",
        detail: e.to_string(),
    })?;
    if m.format != FORMAT {
        return Err(Error::Format {
            what: "manifest",
            detail: format!("unexpected format tag {:?}", m.format),
        });
    }
    Ok(m)
}

/// Load every tensor listed in the manifest, in manifest order.
pub fn load<T: Float>(dir: &Path) -> Result<(Vec<(String, Tensor<T>)>, serde_json::Value)> {
    let m = read_manifest(dir)?;
    if m.dtype != T::DTYPE {
        return Err(Error::Format {
            what: "checkpoint",
            detail: format!("stored as {:?}, requested {:?}", m.dtype, T::DTYPE),
        });
    }
    let width = T::DTYPE.size_of();
    let mut out = Vec::with_capacity(m.tensors.len());
    for e in &m.tensors {
        let path = dir.join(&e.file);
        let bytes = fs::read(&path).map_err(|err| Error::io(&path, err))?;
        let numel: usize = e.shape.iter().product();
        if bytes.len() != numel * width {
            return Err(Error::Format {
                what: "tensor file",
                detail: format!(
                    "{}: {} bytes for shape {:?}",
                    e.file,
                    bytes.len(),
                    e.shape
                ),
            });
        }
        let data = bytes.chunks_exact(width).map(T::from_le_slice).collect();
        out.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
    }
    Ok((out, m.meta))
}
