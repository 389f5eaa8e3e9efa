//! JSON manifest + raw little-endian blob container.
//!
//! Float models: `manifest.json` lists each layer's name, position, type,
//! shape, dtype (`"f32"`) and blob file; blobs hold row-major binary32 values
//! with no header, optionally at a byte `offset` into a shared file.
//!
//! Quantized models: `quantized.json` carries per-layer bit-width, scale,
//! zero point and the allocation that produced them; each `.codes` blob holds
//! one two's-complement byte per code.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{LayerRecord, LayerType, ModelWeights};
use crate::error::{Error, Result};
use crate::quant::{AffineQuantizer, BitWidth, QuantParams, QuantizedTensor, Quantizer, Tensor};
use crate::search::BitAllocation;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const QUANTIZED_MANIFEST_FILE: &str = "quantized.json";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    model_name: String,
    layers: Vec<ManifestLayer>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestLayer {
    name: String,
    position: usize,
    layer_type: LayerType,
    shape: Vec<usize>,
    dtype: String,
    blob: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    offset: Option<u64>,
}

fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D> {
    if !path.is_file() {
        return Err(Error::ManifestNotFound(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn base_dir(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Loads a float model from its JSON manifest.
pub fn load_model(manifest_path: impl AsRef<Path>) -> Result<ModelWeights<f32>> {
    let path = manifest_path.as_ref();
    let manifest: Manifest = read_json(path)?;
    let dir = base_dir(path);

    let mut layers = Vec::with_capacity(manifest.layers.len());
    for entry in manifest.layers {
        if entry.dtype != "f32" {
            return Err(Error::UnsupportedDtype {
                name: entry.name,
                dtype: entry.dtype,
            });
        }
        let blob_path = dir.join(&entry.blob);
        if !blob_path.is_file() {
            return Err(Error::BlobNotFound(entry.blob));
        }
        let bytes = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
        let expected = 4 * entry.shape.iter().product::<usize>() as u64;
        let found = bytes.len() as u64;
        let start = match entry.offset {
            None if found == expected => 0,
            Some(off) if off.checked_add(expected).is_some_and(|end| end <= found) => off,
            _ => {
                return Err(Error::ShapeBlobMismatch {
                    name: entry.name,
                    expected,
                    found: found.saturating_sub(entry.offset.unwrap_or(0)),
                })
            }
        } as usize;
        let values: Vec<f32> = bytes[start..start + expected as usize]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteWeight(entry.name));
        }
        layers.push(LayerRecord {
            name: entry.name,
            position: entry.position,
            layer_type: entry.layer_type,
            weights: Tensor::new(values, entry.shape)?,
        });
    }
    ModelWeights::new(manifest.model_name, layers)
}

/// Writes a float model as `manifest.json` plus one blob per layer into `dir`.
/// Returns the manifest path.
pub fn save_model(model: &ModelWeights<f32>, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(model.len());
    for l in model.layers() {
        let blob = format!("layer{:04}.bin", l.position);
        let bytes: Vec<u8> = l
            .weights
            .values()
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        let p = dir.join(&blob);
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        entries.push(ManifestLayer {
            name: l.name.clone(),
            position: l.position,
            layer_type: l.layer_type,
            shape: l.weights.shape().to_vec(),
            dtype: "f32".into(),
            blob,
            offset: None,
        });
    }
    let path = dir.join(MANIFEST_FILE);
    write_json(
        &path,
        &Manifest {
            model_name: model.model_name().into(),
            layers: entries,
        },
    )?;
    Ok(path)
}

#[derive(Debug, Serialize, Deserialize)]
struct QuantizedManifest {
    model_name: String,
    allocation: BitAllocation<f32>,
    layers: Vec<QuantizedEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct QuantizedEntry {
    name: String,
    position: usize,
    layer_type: LayerType,
    shape: Vec<usize>,
    bits: BitWidth,
    /// Informational; `scale_bits` is authoritative.
    scale: f32,
    scale_bits: u32,
    zero_point: i64,
    blob: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLayer {
    pub name: String,
    pub position: usize,
    pub layer_type: LayerType,
    pub tensor: QuantizedTensor<f32>,
}

/// A reloaded quantized container.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub model_name: String,
    pub allocation: BitAllocation<f32>,
    pub layers: Vec<QuantizedLayer>,
}

impl QuantizedModel {
    /// Float model with every layer dequantized.
    pub fn dequantize(&self) -> Result<ModelWeights<f32>> {
        let layers = self
            .layers
            .iter()
            .map(|l| LayerRecord {
                name: l.name.clone(),
                position: l.position,
                layer_type: l.layer_type,
                weights: l.tensor.dequantize(),
            })
            .collect();
        ModelWeights::new(self.model_name.clone(), layers)
    }
}

/// Quantizes `model` per `allocation` and writes the container into `out_dir`.
/// Returns the manifest path.
pub fn save_quantized(
    model: &ModelWeights<f32>,
    allocation: &BitAllocation<f32>,
    out_dir: impl AsRef<Path>,
) -> Result<PathBuf> {
    allocation.check_covers(model)?;
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut entries = Vec::with_capacity(model.len());
    for l in model.layers() {
        let bits = allocation.bits_for(&l.name).expect("coverage checked");
        let q = AffineQuantizer.quantize(&l.weights, bits)?;
        let blob = format!("layer{:04}.codes", l.position);
        let bytes: Vec<u8> = q.codes().iter().map(|&c| c as u8).collect();
        let p = out_dir.join(&blob);
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        let params = q.params();
        entries.push(QuantizedEntry {
            name: l.name.clone(),
            position: l.position,
            layer_type: l.layer_type,
            shape: q.shape().to_vec(),
            bits,
            scale: params.scale(),
            scale_bits: params.scale().to_bits(),
            zero_point: params.zero_point(),
            blob,
        });
    }
    let path = out_dir.join(QUANTIZED_MANIFEST_FILE);
    let manifest = QuantizedManifest {
        model_name: model.model_name().into(),
        allocation: allocation.clone(),
        layers: entries,
    };
    write_json(&path, &manifest)?;
    Ok(path)
}

/// Reads a container written by [`save_quantized`].
pub fn load_quantized(manifest_path: impl AsRef<Path>) -> Result<QuantizedModel> {
    let path = manifest_path.as_ref();
    let manifest: QuantizedManifest = read_json(path)?;
    let dir = base_dir(path);

    let mut layers = Vec::with_capacity(manifest.layers.len());
    for e in manifest.layers {
        let blob_path = dir.join(&e.blob);
        if !blob_path.is_file() {
            return Err(Error::BlobNotFound(e.blob));
        }
        let bytes = fs::read(&blob_path).map_err(|err| Error::io(&blob_path, err))?;
        let expected = e.shape.iter().product::<usize>() as u64;
        if bytes.len() as u64 != expected {
            return Err(Error::ShapeBlobMismatch {
                name: e.name,
                expected,
                found: bytes.len() as u64,
            });
        }
        let params = QuantParams::new(f32::from_bits(e.scale_bits), e.zero_point, e.bits)?;
        let codes = bytes.into_iter().map(|b| b as i8).collect();
        layers.push(QuantizedLayer {
            name: e.name,
            position: e.position,
            layer_type: e.layer_type,
            tensor: QuantizedTensor::from_parts(codes, params, e.shape)?,
        });
    }
    layers.sort_by_key(|l| l.position);
    Ok(QuantizedModel {
        model_name: manifest.model_name,
        allocation: manifest.allocation,
        layers,
    })
}
