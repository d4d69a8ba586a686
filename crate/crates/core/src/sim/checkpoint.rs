//! Parameter checkpoints.
//!
//! Layout: an 8-byte little-endian header length, a JSON array of
//! `{name, shape, offset}` entries (offset in bytes into the payload), then
//! the contiguous little-endian float32 payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub offset: usize,
}

pub fn encode_checkpoint(store: &ParamStore) -> Result<Vec<u8>> {
    let mut header = Vec::with_capacity(store.len());
    let mut payload = Vec::with_capacity(store.scalar_count() * 4);
    for (_, p) in store.iter() {
        header.push(TensorEntry {
            name: p.name.clone(),
            shape: [p.value.rows(), p.value.cols()],
            offset: payload.len(),
        });
        for &x in p.value.data() {
            payload.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(8 + header.len() + payload.len());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(TensorEntry, Tensor)>> {
    let len_bytes: [u8; 8] = bytes
        .get(..8)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| Error::Checkpoint("truncated header length".into()))?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let header_end = 8usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
    let entries: Vec<TensorEntry> = serde_json::from_slice(&bytes[8..header_end])?;
    let payload = &bytes[header_end..];
    entries
        .into_iter()
        .map(|e| {
            let n = e.shape[0] * e.shape[1];
            let chunk = payload
                .get(e.offset..e.offset + 4 * n)
                .ok_or_else(|| Error::Checkpoint(format!("payload too short for '{}'", e.name)))?;
            let data = chunk
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            let t = Tensor::from_vec(e.shape[0], e.shape[1], data);
            Ok((e, t))
        })
        .collect()
}

/// Overwrites every parameter of `store` from the checkpoint, by name.
pub fn load_into(store: &mut ParamStore, bytes: &[u8]) -> Result<()> {
    let tensors = decode_checkpoint(bytes)?;
    if tensors.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} tensors, model has {}",
            tensors.len(),
            store.len()
        )));
    }
    for (entry, value) in tensors {
        let id = store
            .id(&entry.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor '{}'", entry.name)))?;
        if store.value(id).shape() != value.shape() {
            return Err(Error::Checkpoint(format!("shape mismatch for '{}'", entry.name)));
        }
        *store.value_mut(id) = value;
    }
    Ok(())
}

pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(store)?)?;
    Ok(())
}

pub fn load_checkpoint(store: &mut ParamStore, path: &Path) -> Result<()> {
    load_into(store, &fs::read(path)?)
}
