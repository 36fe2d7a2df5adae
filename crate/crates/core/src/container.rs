//! Bit-exact model container and JSON artifacts.
//!
//! Container layout, all integers little-endian regardless of host:
//!
//! ```text
//! magic            4 bytes  "NWRS"
//! version          u32      1
//! manifest length  u64
//! manifest         UTF-8 JSON
//! blob             concatenated f32 tensor payloads, offsets 8-byte aligned
//! ```
//!
//! The manifest carries the architecture, metadata and a tensor directory of
//! `{name, dtype, shape, offset, byte_length}` entries. Loading validates
//! every entry before touching the blob, so corrupt files produce structured
//! errors rather than panics.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LayerSpec, LayerWeights, Metadata, ModelBundle};
use crate::resync::ResyncReport;
use crate::tensor::{Permutation, Tensor};

pub const MAGIC: [u8; 4] = *b"NWRS";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    byte_length: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    architecture: Vec<LayerSpec>,
    input_shape: Vec<usize>,
    metadata: Metadata,
    tensors: Vec<TensorEntry>,
}

fn tensor_names(layer: usize, w: &LayerWeights) -> Vec<(String, &Tensor)> {
    let mut out = vec![(format!("layer{layer}.weight"), &w.weight)];
    if let Some(t) = &w.bias {
        out.push((format!("layer{layer}.bias"), t));
    }
    if let Some(t) = &w.scale {
        out.push((format!("layer{layer}.scale"), t));
    }
    if let Some(t) = &w.shift {
        out.push((format!("layer{layer}.shift"), t));
    }
    out
}

/// Encodes a bundle into the container byte format.
pub fn encode_model(m: &ModelBundle) -> Result<Vec<u8>> {
    m.validate()?;
    let mut entries = Vec::new();
    let mut blob = Vec::new();
    for (l, w) in m.weights.iter().enumerate() {
        for (name, tensor) in tensor_names(l, w) {
            while blob.len() % 8 != 0 {
                blob.push(0u8);
            }
            let offset = blob.len() as u64;
            for &v in tensor.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            entries.push(TensorEntry {
                name,
                dtype: "f32".into(),
                shape: tensor.shape().to_vec(),
                offset,
                byte_length: (tensor.len() * 4) as u64,
            });
        }
    }
    let manifest = Manifest {
        architecture: m.layers.clone(),
        input_shape: m.input_shape.clone(),
        metadata: m.metadata.clone(),
        tensors: entries,
    };
    let manifest_bytes = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(HEADER_LEN + manifest_bytes.len() + blob.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest_bytes);
    out.extend_from_slice(&blob);
    Ok(out)
}

/// Decodes a container, validating the header, the tensor directory and the
/// payload before constructing the bundle.
pub fn decode_model(bytes: &[u8]) -> Result<ModelBundle> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!(
            "file too short for header: {} bytes",
            bytes.len()
        )));
    }
    if bytes[0..4] != MAGIC {
        return Err(Error::Format("bad magic, not a model container".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let manifest_end = (HEADER_LEN as u64)
        .checked_add(manifest_len)
        .filter(|&end| end <= bytes.len() as u64)
        .ok_or_else(|| {
            Error::Corruption(format!("manifest length {manifest_len} exceeds file size"))
        })? as usize;
    let manifest: Manifest = serde_json::from_slice(&bytes[HEADER_LEN..manifest_end])
        .map_err(|e| Error::Corruption(format!("manifest does not parse: {e}")))?;
    let blob = &bytes[manifest_end..];

    // directory validation: bounds, alignment, dtype, declared size, overlap
    let mut spans: Vec<(u64, u64, &str)> = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        if entry.dtype != "f32" {
            return Err(Error::Corruption(format!(
                "tensor {}: unsupported dtype {}",
                entry.name, entry.dtype
            )));
        }
        if entry.offset % 8 != 0 {
            return Err(Error::Corruption(format!(
                "tensor {}: offset {} not 8-byte aligned",
                entry.name, entry.offset
            )));
        }
        let count = entry
            .shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Corruption(format!("tensor {}: shape overflow", entry.name)))?;
        if entry.byte_length != (count as u64) * 4 {
            return Err(Error::Corruption(format!(
                "tensor {}: byte length {} does not match shape {:?}",
                entry.name, entry.byte_length, entry.shape
            )));
        }
        let end = entry
            .offset
            .checked_add(entry.byte_length)
            .ok_or_else(|| Error::Corruption(format!("tensor {}: offset overflow", entry.name)))?;
        if end > blob.len() as u64 {
            return Err(Error::Corruption(format!(
                "tensor {}: extends past end of blob",
                entry.name
            )));
        }
        spans.push((entry.offset, end, &entry.name));
    }
    spans.sort();
    for pair in spans.windows(2) {
        if pair[1].0 < pair[0].1 {
            return Err(Error::Corruption(format!(
                "tensors {} and {} overlap",
                pair[0].2, pair[1].2
            )));
        }
    }

    let read_tensor = |name: &str| -> Result<Option<Tensor>> {
        let Some(entry) = manifest.tensors.iter().find(|e| e.name == name) else {
            return Ok(None);
        };
        let start = entry.offset as usize;
        let end = (entry.offset + entry.byte_length) as usize;
        let mut data = Vec::with_capacity((end - start) / 4);
        for chunk in blob[start..end].chunks_exact(4) {
            let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            if !v.is_finite() {
                return Err(Error::Corruption(format!(
                    "tensor {name} contains a non-finite value"
                )));
            }
            data.push(v);
        }
        Tensor::new(entry.shape.clone(), data).map(Some)
    };

    let mut weights = Vec::with_capacity(manifest.architecture.len());
    for (l, spec) in manifest.architecture.iter().enumerate() {
        let weight = read_tensor(&format!("layer{l}.weight"))?
            .ok_or_else(|| Error::Corruption(format!("missing tensor layer{l}.weight")))?;
        let bias = read_tensor(&format!("layer{l}.bias"))?;
        let scale = read_tensor(&format!("layer{l}.scale"))?;
        let shift = read_tensor(&format!("layer{l}.shift"))?;
        if spec.has_bias != bias.is_some() {
            return Err(Error::Corruption(format!(
                "layer {l}: bias presence disagrees with declared spec"
            )));
        }
        weights.push(LayerWeights {
            weight,
            bias,
            scale,
            shift,
        });
    }
    let expected: usize = manifest
        .architecture
        .iter()
        .enumerate()
        .map(|(l, _)| tensor_names(l, &weights[l]).len())
        .sum();
    if manifest.tensors.len() != expected {
        return Err(Error::Corruption(format!(
            "manifest lists {} tensors, architecture declares {expected}",
            manifest.tensors.len()
        )));
    }
    ModelBundle::new(
        manifest.architecture,
        weights,
        manifest.input_shape,
        manifest.metadata,
    )
}

pub fn save_model(m: &ModelBundle, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_model(m)?)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelBundle> {
    decode_model(&fs::read(path)?)
}

/// Externalized permutation: `{layer, perm, seed}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationFile {
    pub layer: usize,
    pub perm: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl PermutationFile {
    pub fn permutation(&self) -> Result<Permutation> {
        Permutation::from_map(self.perm.clone())
    }
}

pub fn save_permutation(
    path: impl AsRef<Path>,
    layer: usize,
    p: &Permutation,
    seed: Option<u64>,
) -> Result<()> {
    let file = PermutationFile {
        layer,
        perm: p.map().to_vec(),
        seed,
    };
    fs::write(path, serde_json::to_vec_pretty(&file)?)?;
    Ok(())
}

pub fn load_permutation(path: impl AsRef<Path>) -> Result<PermutationFile> {
    let file: PermutationFile = serde_json::from_slice(&fs::read(path)?)?;
    file.permutation()?; // validate the bijection on load
    Ok(file)
}

pub fn save_report(report: &ResyncReport, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(report)?)?;
    Ok(())
}

pub fn load_report(path: impl AsRef<Path>) -> Result<ResyncReport> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}
