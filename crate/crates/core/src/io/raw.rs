//! `rawf32` payloads: little-endian 32-bit floats, last axis fastest, vector
//! components concatenated. Geometry lives in a JSON sidecar next to the
//! payload (`name.rawf32` → `name.json`), or in a directory-wide `meta.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GridShape;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Intent {
    Scalar,
    Vector,
}

/// Sidecar describing one `rawf32` payload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawHeader {
    pub dims: Vec<usize>,
    #[serde(default)]
    pub spacing: Option<Vec<f64>>,
    #[serde(default)]
    pub intent: Option<Intent>,
}

impl RawHeader {
    pub fn new(shape: &GridShape, intent: Intent) -> Self {
        Self {
            dims: shape.dims().to_vec(),
            spacing: Some(shape.spacing().to_vec()),
            intent: Some(intent),
        }
    }

    pub fn shape(&self) -> Result<GridShape> {
        match &self.spacing {
            Some(h) => GridShape::with_spacing(&self.dims, h),
            None => GridShape::new(&self.dims),
        }
    }
}

/// `name.rawf32` → `name.json`.
pub fn sidecar_path(payload: &Path) -> PathBuf {
    payload.with_extension("json")
}

/// Finds the geometry for a payload: its own sidecar first, then `meta.json`
/// in the same directory.
pub fn find_header(payload: &Path) -> Result<RawHeader> {
    let own = sidecar_path(payload);
    let shared = payload.parent().unwrap_or_else(|| Path::new(".")).join("meta.json");
    let path = if own.is_file() {
        own
    } else if shared.is_file() {
        shared
    } else {
        return Err(Error::MissingFile(own));
    };
    let text = fs::read_to_string(&path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path,
        message: e.to_string(),
    })
}

pub fn encode_f32(values: impl IntoIterator<Item = f32>) -> Vec<u8> {
    values.into_iter().flat_map(f32::to_le_bytes).collect()
}

pub fn read_payload(path: &Path) -> Result<Vec<f32>> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!("payload of {} bytes is not a whole number of f32", bytes.len()),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

pub fn write_payload(path: &Path, values: impl IntoIterator<Item = f32>) -> Result<()> {
    fs::write(path, encode_f32(values))?;
    Ok(())
}

pub fn write_header(path: &Path, header: &RawHeader) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(header)? + "\n")?;
    Ok(())
}
