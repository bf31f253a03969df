//! Raw little-endian `f32` cubes with a JSON sidecar header.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixing::HsiCube;
use crate::tensor::Tensor;

pub const DTYPE: &str = "f32le";
pub const ORDER: &str = "band-interleaved-by-pixel";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CubeHeader {
    pub rows: usize,
    pub cols: usize,
    pub bands: usize,
    pub dtype: String,
    pub order: String,
}

impl CubeHeader {
    pub fn new(rows: usize, cols: usize, bands: usize) -> Self {
        Self {
            rows,
            cols,
            bands,
            dtype: DTYPE.into(),
            order: ORDER.into(),
        }
    }

    pub fn payload_bytes(&self) -> usize {
        self.rows * self.cols * self.bands * 4
    }
}

/// `<path>.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes any `(rows, cols, k)` tensor in the cube format.
pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let &[rows, cols, bands] = t.shape() else {
        return Err(Error::data(format!("cube files hold 3-axis tensors, got shape {:?}", t.shape())));
    };
    let header = CubeHeader::new(rows, cols, bands);
    let json = serde_json::to_string_pretty(&header).map_err(|e| Error::data(e.to_string()))?;
    let side = sidecar_path(path);
    fs::write(&side, json + "\n").map_err(|e| Error::io(&side, e))?;
    let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_header(path: &Path) -> Result<CubeHeader> {
    let side = sidecar_path(path);
    if !side.exists() {
        return Err(Error::data(format!("missing header sidecar {}", side.display())));
    }
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let header: CubeHeader =
        serde_json::from_str(&text).map_err(|e| Error::data(format!("{}: {e}", side.display())))?;
    if header.dtype != DTYPE {
        return Err(Error::data(format!("{}: unknown dtype {:?}", side.display(), header.dtype)));
    }
    if header.order != ORDER {
        return Err(Error::data(format!("{}: unknown order {:?}", side.display(), header.order)));
    }
    Ok(header)
}

/// Reads a `(rows, cols, k)` tensor written by [`save_tensor`].
pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let header = load_header(path)?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != header.payload_bytes() {
        return Err(Error::data(format!(
            "{}: length mismatch, payload is {} bytes, header implies {}",
            path.display(),
            bytes.len(),
            header.payload_bytes()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|w| f32::from_le_bytes([w[0], w[1], w[2], w[3]]))
        .collect();
    Ok(Tensor::new(&[header.rows, header.cols, header.bands], data)?)
}

pub fn save_cube(path: &Path, cube: &HsiCube) -> Result<()> {
    save_tensor(path, cube.tensor())
}

pub fn load_cube(path: &Path) -> Result<HsiCube> {
    HsiCube::new(load_tensor(path)?)
}
