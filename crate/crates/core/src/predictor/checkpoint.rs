//! Parameter checkpoints.
//!
//! Layout: magic `UQPM`, `u32` version, `u32` manifest length, a JSON
//! manifest (config plus one `{name, shape}` entry per tensor, in storage
//! order), then every parameter as little-endian `f64`. All integers are
//! little-endian.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::net::{PredictorConfig, SliceNet};
use super::{PredictorError, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"UQPM";

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    config: PredictorConfig,
    tensors: Vec<TensorEntry>,
}

fn manifest_for(net: &SliceNet) -> Manifest {
    let mut tensors = Vec::new();
    for (kind, level, l) in net.layout().convs() {
        tensors.push(TensorEntry {
            name: format!("{kind}{level}.weight"),
            shape: vec![l.out_channels, l.in_channels, l.kernel, l.kernel],
        });
        tensors.push(TensorEntry {
            name: format!("{kind}{level}.bias"),
            shape: vec![l.out_channels],
        });
    }
    Manifest {
        config: *net.config(),
        tensors,
    }
}

pub fn save_checkpoint(net: &SliceNet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let manifest = serde_json::to_vec(&manifest_for(net)).expect("manifest serializes");
    let mut bytes = Vec::with_capacity(12 + manifest.len() + 8 * net.n_params());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&manifest);
    for &p in net.params() {
        bytes.extend_from_slice(&p.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|source| PredictorError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<SliceNet> {
    let path = path.as_ref();
    let bad = |reason: String| PredictorError::Checkpoint {
        path: path.display().to_string(),
        reason,
    };
    let bytes = fs::read(path).map_err(|source| PredictorError::Io {
        path: path.display().to_string(),
        source,
    })?;
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(bad("missing UQPM magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = bytes
        .get(12..12 + len)
        .ok_or_else(|| bad("truncated manifest".into()))?;
    let manifest: Manifest = serde_json::from_slice(body).map_err(|e| bad(e.to_string()))?;

    let payload = &bytes[12 + len..];
    if payload.len() % 8 != 0 {
        return Err(bad("parameter block is not a whole number of f64".into()));
    }
    let params: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let net = SliceNet::from_params(manifest.config, params).map_err(|e| bad(e.to_string()))?;
    if manifest_for(&net).tensors != manifest.tensors {
        return Err(bad("tensor shapes do not match the configuration".into()));
    }
    Ok(net)
}
