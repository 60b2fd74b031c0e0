//! Model checkpoints: one file holding a JSON manifest (architecture
//! config, EMA tag, parameter names and shapes) followed by the raw
//! little-endian float32 parameter payloads in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SegError};
use crate::network::{NetworkConfig, ParamSet, SegmentationModel};

const MAGIC: &[u8; 4] = b"SCK1";

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: NetworkConfig,
    ema: bool,
    params: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
}

/// Writes a checkpoint; `ema` tags teacher checkpoints.
pub fn save_checkpoint(model: &SegmentationModel, ema: bool, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let manifest = Manifest {
        config: model.config.clone(),
        ema,
        params: model
            .params
            .entries()
            .iter()
            .map(|e| ManifestEntry {
                name: e.name.clone(),
                shape: e.shape.clone(),
            })
            .collect(),
    };
    let manifest_json = serde_json::to_vec(&manifest)?;
    let mut bytes = Vec::with_capacity(8 + manifest_json.len() + model.params.num_values() * 4);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(manifest_json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&manifest_json);
    for e in model.params.entries() {
        for v in &e.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| SegError::io(path, e))
}

/// Reads a checkpoint back; returns the model and its EMA tag.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(SegmentationModel, bool)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| SegError::io(path, e))?;
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(SegError::format(path, "not a checkpoint file"));
    }
    let mlen = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) as usize;
    if bytes.len() < 8 + mlen {
        return Err(SegError::format(path, "truncated manifest"));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[8..8 + mlen])?;
    manifest.config.validate()?;
    let mut offset = 8 + mlen;
    let mut params = ParamSet::default();
    for entry in &manifest.params {
        let count: usize = entry.shape.iter().product();
        let nbytes = count * 4;
        if bytes.len() < offset + nbytes {
            return Err(SegError::format(
                path,
                format!("truncated payload at parameter {}", entry.name),
            ));
        }
        let data: Vec<f32> = bytes[offset..offset + nbytes]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        params.push(entry.name.clone(), entry.shape.clone(), data);
        offset += nbytes;
    }
    if offset != bytes.len() {
        return Err(SegError::format(path, "trailing bytes after payload"));
    }
    Ok((
        SegmentationModel {
            config: manifest.config,
            params,
        },
        manifest.ema,
    ))
}
