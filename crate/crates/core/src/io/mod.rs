//! Volume persistence: `rawf32` + JSON sidecar, and a NIfTI-1 subset.

pub mod nifti;
pub mod raw;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridShape, ScalarImage, VectorField};
use crate::scalar::Real;

pub use raw::{Intent, RawHeader};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    /// `.rawf32` payload plus `.json` sidecar.
    Rawf32,
    /// Single-file `.nii`.
    Nifti1,
}

impl Format {
    /// Picks the format from the file extension (`.nii` or anything else).
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("nii") | Some("gz") => Format::Nifti1,
            _ => Format::Rawf32,
        }
    }
}

/// A loaded volume.
#[derive(Clone, Debug, PartialEq)]
pub enum Volume<T> {
    Scalar(ScalarImage<T>),
    Vector(VectorField<T>),
}

impl<T: Real> Volume<T> {
    pub fn shape(&self) -> &GridShape {
        match self {
            Volume::Scalar(s) => s.shape(),
            Volume::Vector(v) => v.shape(),
        }
    }

    fn from_components(path: &Path, shape: GridShape, comps: Vec<Vec<f32>>) -> Result<Self> {
        let widen = |c: Vec<f32>| c.into_iter().map(T::of_f32).collect::<Vec<T>>();
        let bad = |e: Error| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        if comps.len() == 1 {
            let c = comps.into_iter().next().expect("one component");
            ScalarImage::new(shape, widen(c)).map(Volume::Scalar).map_err(bad)
        } else {
            VectorField::new(shape, comps.into_iter().map(widen).collect())
                .map(Volume::Vector)
                .map_err(bad)
        }
    }

    fn components_f32(&self) -> Vec<Vec<f32>> {
        let narrow = |c: &[T]| c.iter().map(|v| v.as_f32()).collect::<Vec<f32>>();
        match self {
            Volume::Scalar(s) => vec![narrow(s.values())],
            Volume::Vector(v) => v.components().iter().map(|c| narrow(c)).collect(),
        }
    }

    pub fn into_scalar(self, path: &Path) -> Result<ScalarImage<T>> {
        match self {
            Volume::Scalar(s) => Ok(s),
            Volume::Vector(_) => Err(Error::Format {
                path: path.to_path_buf(),
                message: "expected a scalar volume, found a vector field".into(),
            }),
        }
    }

    pub fn into_vector(self, path: &Path) -> Result<VectorField<T>> {
        match self {
            Volume::Vector(v) => Ok(v),
            Volume::Scalar(_) => Err(Error::Format {
                path: path.to_path_buf(),
                message: "expected a vector field, found a scalar volume".into(),
            }),
        }
    }
}

/// Reads a payload with a known geometry, deciding scalar vs vector from its
/// length.
pub fn read_rawf32_with<T: Real>(path: &Path, header: &RawHeader) -> Result<Volume<T>> {
    let shape = header.shape().map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let values = raw::read_payload(path)?;
    let n = shape.len();
    let ncomp = match header.intent {
        Some(Intent::Scalar) => 1,
        Some(Intent::Vector) => shape.ndim(),
        None if values.len() == n => 1,
        None => shape.ndim(),
    };
    if values.len() != ncomp * n {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!(
                "payload holds {} floats, expected {} ({} component(s) x {n} points)",
                values.len(),
                ncomp * n,
                ncomp
            ),
        });
    }
    let comps = values.chunks_exact(n).map(<[f32]>::to_vec).collect();
    Volume::from_components(path, shape, comps)
}

pub fn read_volume<T: Real>(path: &Path) -> Result<Volume<T>> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    match Format::from_path(path) {
        Format::Nifti1 => {
            let vol = nifti::read(path)?;
            Volume::from_components(path, vol.shape, vol.components)
        }
        Format::Rawf32 => read_rawf32_with(path, &raw::find_header(path)?),
    }
}

pub fn read_scalar<T: Real>(path: &Path) -> Result<ScalarImage<T>> {
    read_volume(path)?.into_scalar(path)
}

pub fn read_vector<T: Real>(path: &Path) -> Result<VectorField<T>> {
    read_volume(path)?.into_vector(path)
}

/// Writes `value`; for `rawf32` the sidecar `name.json` is written too.
pub fn write_volume<T: Real>(value: &Volume<T>, path: &Path, format: Format) -> Result<()> {
    let comps = value.components_f32();
    match format {
        Format::Nifti1 => nifti::write(path, value.shape(), &comps),
        Format::Rawf32 => {
            raw::write_payload(path, comps.into_iter().flatten())?;
            let intent = match value {
                Volume::Scalar(_) => Intent::Scalar,
                Volume::Vector(_) => Intent::Vector,
            };
            raw::write_header(&raw::sidecar_path(path), &RawHeader::new(value.shape(), intent))
        }
    }
}

pub fn write_scalar<T: Real>(img: &ScalarImage<T>, path: &Path) -> Result<()> {
    write_volume(&Volume::Scalar(img.clone()), path, Format::from_path(path))
}

pub fn write_vector<T: Real>(field: &VectorField<T>, path: &Path) -> Result<()> {
    write_volume(&Volume::Vector(field.clone()), path, Format::from_path(path))
}

/// Writes only the payload bytes (no sidecar), as the subprocess protocol
/// and file-provider directories expect.
pub fn write_payload_only<T: Real>(value: &Volume<T>, path: &Path) -> Result<()> {
    raw::write_payload(path, value.components_f32().into_iter().flatten())
}
