//! Checkpoint files: one line of JSON header, then every parameter as
//! little-endian `f32` in store order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamStore};

const FORMAT: &str = "hsunmix-checkpoint-1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// `endmember` or `rest`.
    pub group: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub epoch: usize,
    /// Hex FNV-1a hash of the resolved run configuration.
    pub config_hash: String,
    pub params: Vec<ParamEntry>,
}

/// 64-bit FNV-1a, stable across platforms and toolchains.
pub fn config_hash(text: &str) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

fn group_name(g: ParamGroup) -> &'static str {
    match g {
        ParamGroup::Endmember => "endmember",
        ParamGroup::Rest => "rest",
    }
}

pub fn save_checkpoint(path: &Path, store: &ParamStore, epoch: usize, config_hash: &str) -> Result<()> {
    let header = CheckpointHeader {
        format: FORMAT.into(),
        epoch,
        config_hash: config_hash.into(),
        params: store
            .iter()
            .map(|(_, p)| ParamEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                group: group_name(p.group).into(),
            })
            .collect(),
    };
    let mut bytes = serde_json::to_vec(&header).map_err(|e| Error::data(e.to_string()))?;
    bytes.push(b'\n');
    bytes.reserve(store.numel() * 4);
    for (_, p) in store.iter() {
        bytes.extend(p.value.data().iter().flat_map(|v| v.to_le_bytes()));
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint into `store`, whose names and shapes must match.
pub fn load_checkpoint(path: &Path, store: &mut ParamStore) -> Result<CheckpointHeader> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::data(format!("{}: {msg}", path.display()));
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("missing header line".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..split]).map_err(|e| bad(e.to_string()))?;
    if header.format != FORMAT {
        return Err(bad(format!("unknown format {:?}", header.format)));
    }
    if header.params.len() != store.len() {
        return Err(bad(format!("{} parameters, model has {}", header.params.len(), store.len())));
    }
    for ((_, p), entry) in store.iter().zip(&header.params) {
        if p.name != entry.name || p.value.shape() != entry.shape.as_slice() {
            return Err(bad(format!("parameter {} {:?} does not match the model", entry.name, entry.shape)));
        }
    }
    let blob = &bytes[split + 1..];
    if blob.len() != store.numel() * 4 {
        return Err(bad(format!("payload is {} bytes, expected {}", blob.len(), store.numel() * 4)));
    }
    let mut words = blob.chunks_exact(4).map(|w| f32::from_le_bytes([w[0], w[1], w[2], w[3]]));
    for (_, p) in store.iter_mut() {
        for v in p.value.data_mut() {
            *v = words.next().expect("length checked");
        }
    }
    Ok(header)
}
