//! Binary checkpoint: magic, u32 version, u64 header length, JSON header,
//! then little-endian tensor payload in header order.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use super::{AdapterRegistry, EncoderConfig, MerlModel};
use crate::error::{MerlError, Result};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MERLCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dtype: String,
    encoder: EncoderConfig,
    metadata: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

fn dtype_of<F: Scalar>() -> &'static str {
    if std::mem::size_of::<F>() == 4 {
        "f32"
    } else {
        "f64"
    }
}

/// Writes every parameter and buffer of `model`, plus free-form metadata.
pub fn save_checkpoint<F: Scalar>(path: &Path, model: &MerlModel<F>, metadata: serde_json::Value) -> Result<()> {
    let dtype = dtype_of::<F>();
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    model.read_all_params(&mut |name, p| {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: p.value.shape().to_vec(),
            offset: payload.len(),
        });
        for v in p.value.iter() {
            if dtype == "f32" {
                payload.extend_from_slice(&v.as_f32().to_le_bytes());
            } else {
                payload.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
    });
    let header = serde_json::to_vec(&Header {
        dtype: dtype.into(),
        encoder: model.config.clone(),
        metadata,
        tensors,
    })?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| MerlError::io(dir, e))?;
    }
    // write-then-rename so an interrupted save never clobbers the last good file
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| MerlError::io(&tmp, e))?;
    let write = |f: &mut fs::File, bytes: &[u8]| f.write_all(bytes).map_err(|e| MerlError::io(&tmp, e));
    write(&mut f, CHECKPOINT_MAGIC)?;
    write(&mut f, &VERSION.to_le_bytes())?;
    write(&mut f, &(header.len() as u64).to_le_bytes())?;
    write(&mut f, &header)?;
    write(&mut f, &payload)?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| MerlError::io(path, e))
}

/// Rebuilds the model described by the checkpoint and restores its tensors.
pub fn load_checkpoint<F: Scalar>(path: &Path, registry: &AdapterRegistry) -> Result<(MerlModel<F>, serde_json::Value)> {
    let bytes = fs::read(path).map_err(|e| MerlError::io(path, e))?;
    let bad = |m: &str| MerlError::Checkpoint(format!("{}: {m}", path.display()));
    if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body)?;
    let payload = &bytes[20 + hlen..];
    let width = match header.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        other => return Err(bad(&format!("unknown dtype {other}"))),
    };
    let mut stored: BTreeMap<String, ArrayD<F>> = BTreeMap::new();
    for t in &header.tensors {
        let n: usize = t.shape.iter().product();
        let raw = payload
            .get(t.offset..t.offset + n * width)
            .ok_or_else(|| bad(&format!("tensor {} out of range", t.name)))?;
        let values: Vec<F> = raw
            .chunks_exact(width)
            .map(|c| {
                if width == 4 {
                    F::of(f32::from_le_bytes(c.try_into().unwrap()) as f64)
                } else {
                    F::of(f64::from_le_bytes(c.try_into().unwrap()))
                }
            })
            .collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&t.shape), values).map_err(|e| bad(&e.to_string()))?;
        stored.insert(t.name.clone(), arr);
    }
    let mut model = MerlModel::new(header.encoder, registry)?;
    let mut problems = Vec::new();
    model.visit_all_params(&mut |name, p| match stored.remove(name) {
        Some(v) if v.shape() == p.value.shape() => p.value = v,
        Some(v) => problems.push(format!("{name}: shape {:?} vs {:?}", v.shape(), p.value.shape())),
        None => problems.push(format!("{name}: missing")),
    });
    problems.extend(stored.keys().map(|k| format!("{k}: unexpected")));
    if !problems.is_empty() {
        return Err(bad(&problems.join(", ")));
    }
    Ok((model, header.metadata))
}
