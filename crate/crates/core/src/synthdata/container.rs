//! Model container: `DQMC` magic, little-endian u32 manifest length, JSON
//! manifest, then a blob of little-endian f32 tensors addressed by the
//! manifest's tensor directory.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::toydet::{AttachedQuantizers, ConvLayer, Head, QuantizedModel, ToyDetector, ToyDetectorConfig, Unit, UnitKind};

pub const CONTAINER_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"DQMC";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the blob.
    offset: usize,
    dtype: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct ConvEntry {
    name: String,
    stride: usize,
    pad: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct UnitEntry {
    name: String,
    kind: UnitKind,
    source: Option<usize>,
    convs: Vec<ConvEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    architecture: ToyDetectorConfig,
    units: Vec<UnitEntry>,
    head_features: Vec<usize>,
    head_cls: ConvEntry,
    head_box: ConvEntry,
    tensors: Vec<TensorEntry>,
    quantizers: AttachedQuantizers,
}

fn conv_entry(l: &ConvLayer) -> ConvEntry {
    ConvEntry {
        name: l.name.clone(),
        stride: l.stride,
        pad: l.pad,
    }
}

pub fn save_quantized(path: &Path, qm: &QuantizedModel) -> Result<()> {
    let model = &qm.model;
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    for layer in model.conv_layers() {
        for (suffix, t) in [("weight", &layer.weight), ("bias", &layer.bias)] {
            tensors.push(TensorEntry {
                name: format!("{}.{suffix}", layer.name),
                shape: t.shape().to_vec(),
                offset: blob.len(),
                dtype: "f32le".into(),
            });
            for &v in t.data() {
                blob.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    let manifest = Manifest {
        format_version: CONTAINER_VERSION,
        architecture: model.config.clone(),
        units: model
            .units
            .iter()
            .map(|u| UnitEntry {
                name: u.name.clone(),
                kind: u.kind,
                source: u.source,
                convs: u.convs.iter().map(conv_entry).collect(),
            })
            .collect(),
        head_features: model.head.features.clone(),
        head_cls: conv_entry(&model.head.cls),
        head_box: conv_entry(&model.head.bbox),
        tensors,
        quantizers: qm.quant.clone(),
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(8 + json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn save_model(path: &Path, model: &ToyDetector) -> Result<()> {
    save_quantized(path, &QuantizedModel::fp(model.clone()))
}

pub fn load_quantized(path: &Path) -> Result<QuantizedModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(bad("missing container magic".into()));
    }
    let mlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let json = bytes.get(8..8 + mlen).ok_or_else(|| bad("truncated manifest".into()))?;
    let peek: serde_json::Value = serde_json::from_slice(json)?;
    let version = peek.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != CONTAINER_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CONTAINER_VERSION,
        });
    }
    let manifest: Manifest = serde_json::from_value(peek)?;
    let blob = &bytes[8 + mlen..];

    let read_tensor = |name: &str| -> Result<Tensor> {
        let e = manifest
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| bad(format!("tensor {name} missing from directory")))?;
        if e.dtype != "f32le" {
            return Err(bad(format!("tensor {name}: unsupported dtype {}", e.dtype)));
        }
        let n: usize = e.shape.iter().product();
        let end = e.offset.checked_add(4 * n).filter(|&end| end <= blob.len());
        let Some(end) = end else {
            return Err(bad(format!(
                "tensor {name}: bytes {}..{} outside blob of {} bytes",
                e.offset,
                e.offset + 4 * n,
                blob.len()
            )));
        };
        let data = blob[e.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Tensor::new(&e.shape, data).map_err(|err| bad(format!("tensor {name}: {err}")))
    };
    let conv = |c: &ConvEntry| -> Result<ConvLayer> {
        Ok(ConvLayer {
            name: c.name.clone(),
            weight: read_tensor(&format!("{}.weight", c.name))?,
            bias: read_tensor(&format!("{}.bias", c.name))?,
            stride: c.stride,
            pad: c.pad,
        })
    };
    let units = manifest
        .units
        .iter()
        .map(|u| {
            Ok(Unit {
                name: u.name.clone(),
                kind: u.kind,
                source: u.source,
                convs: u.convs.iter().map(conv).collect::<Result<_>>()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let model = ToyDetector {
        config: manifest.architecture.clone(),
        units,
        head: Head {
            features: manifest.head_features.clone(),
            cls: conv(&manifest.head_cls)?,
            bbox: conv(&manifest.head_box)?,
        },
    };
    model.validate().map_err(|e| bad(e.to_string()))?;
    for q in manifest.quantizers.weights.values().chain(manifest.quantizers.acts.values()) {
        q.validate().map_err(|e| bad(e.to_string()))?;
    }
    Ok(QuantizedModel {
        model,
        quant: manifest.quantizers,
    })
}

pub fn load_model(path: &Path) -> Result<ToyDetector> {
    Ok(load_quantized(path)?.model)
}
