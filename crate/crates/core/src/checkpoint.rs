//! Model checkpoint format: magic `RFOP1`, a length-prefixed UTF-8 JSON
//! manifest listing each parameter (name, shape, byte offset into the
//! blob), then a contiguous little-endian f64 blob. Round-trips
//! byte-exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{RfopParams, PARAM_NAMES};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"RFOP1";

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    params: Vec<ManifestEntry>,
}

pub fn save_params<S: Scalar>(params: &RfopParams<S>, path: &Path) -> Result<()> {
    fs::write(path, encode_params(params))?;
    Ok(())
}

pub fn encode_params<S: Scalar>(params: &RfopParams<S>) -> Vec<u8> {
    let mut entries = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    for (name, tensor) in params.tensors() {
        entries.push(ManifestEntry {
            name: name.to_string(),
            shape: tensor.shape().to_vec(),
            offset: blob.len(),
        });
        for v in tensor.data() {
            blob.extend_from_slice(&v.into_f64().to_le_bytes());
        }
    }
    let manifest =
        serde_json::to_vec(&Manifest { params: entries }).expect("manifest serializes");

    let mut out = Vec::with_capacity(MAGIC.len() + 8 + manifest.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    out.extend_from_slice(&blob);
    out
}

pub fn load_params<S: Scalar>(path: &Path) -> Result<RfopParams<S>> {
    let bytes = fs::read(path)?;
    decode_params(&bytes)
}

pub fn decode_params<S: Scalar>(bytes: &[u8]) -> Result<RfopParams<S>> {
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint("bad magic, not an RFOP1 checkpoint".into()));
    }
    let mut len_buf = [0u8; 8];
    len_buf.copy_from_slice(&bytes[MAGIC.len()..MAGIC.len() + 8]);
    let manifest_len = u64::from_le_bytes(len_buf) as usize;
    let manifest_start = MAGIC.len() + 8;
    let blob_start = manifest_start
        .checked_add(manifest_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| Error::Checkpoint("manifest length exceeds file".into()))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[manifest_start..blob_start])?;
    let blob = &bytes[blob_start..];

    let mut tensors = Vec::with_capacity(manifest.params.len());
    for entry in manifest.params {
        let numel = entry
            .shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| {
                Error::Checkpoint(format!("parameter `{}` shape overflows", entry.name))
            })?;
        let end = numel
            .checked_mul(8)
            .and_then(|bytes| entry.offset.checked_add(bytes))
            .filter(|&e| e <= blob.len())
            .ok_or_else(|| {
                Error::Checkpoint(format!(
                    "parameter `{}` spans past the end of the blob",
                    entry.name
                ))
            })?;
        let data: Vec<S> = blob[entry.offset..end]
            .chunks_exact(8)
            .map(|c| {
                let mut buf = [0u8; 8];
                buf.copy_from_slice(c);
                S::from_f64(f64::from_le_bytes(buf))
            })
            .collect();
        let mut tensor = Tensor::from_vec(entry.shape, data)
            .map_err(|e| Error::Checkpoint(format!("parameter `{}`: {e}", entry.name)))?;
        tensor.set_requires_grad(true);
        tensors.push((entry.name, tensor));
    }
    if tensors.len() != PARAM_NAMES.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} parameters, found {}",
            PARAM_NAMES.len(),
            tensors.len()
        )));
    }
    RfopParams::from_parts(tensors)
}
