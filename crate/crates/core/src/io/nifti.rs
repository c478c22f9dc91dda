//! Minimal single-file NIfTI-1 (`.nii`) support.
//!
//! Accepted: little-endian 348-byte header, magic `n+1`, no extensions,
//! datatype float32 or int16, 2D/3D scalar volumes (`dim[0]` 2 or 3) and
//! vector volumes stored as `dim[0] = 5` with `dim[4] = 1`, `dim[5] = d`.
//! `scl_slope`/`scl_inter` are applied when the slope is nonzero.
//! Orientation fields are ignored: voxels are taken in index order.
//!
//! NIfTI stores the first axis fastest; values are reordered to the crate's
//! last-axis-fastest layout so that axis `i` keeps meaning `dim[i + 1]`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::GridShape;

pub const HEADER_SIZE: usize = 348;
pub const VOX_OFFSET: usize = 352;
pub const DT_INT16: i16 = 4;
pub const DT_FLOAT32: i16 = 16;
pub const INTENT_VECTOR: i16 = 1007;

/// Decoded payload with geometry, in crate layout.
#[derive(Clone, Debug, PartialEq)]
pub struct NiftiVolume {
    pub shape: GridShape,
    /// One entry for scalar volumes, `d` for vector volumes.
    pub components: Vec<Vec<f32>>,
}

fn unsupported(path: &Path, field: impl Into<String>) -> Error {
    Error::Unsupported {
        path: path.to_path_buf(),
        field: field.into(),
    }
}

fn malformed(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn i16_at(b: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([b[off], b[off + 1]])
}

fn i32_at(b: &[u8], off: usize) -> i32 {
    i32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

fn f32_at(b: &[u8], off: usize) -> f32 {
    f32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

/// Converts between first-axis-fastest (NIfTI) and last-axis-fastest
/// (crate) orderings.
fn reorder<T: Copy>(src: &[T], dims: &[usize], to_crate: bool) -> Vec<T> {
    let d = dims.len();
    let mut first_fastest = vec![1usize; d];
    for a in 1..d {
        first_fastest[a] = first_fastest[a - 1] * dims[a - 1];
    }
    let mut last_fastest = vec![1usize; d];
    for a in (0..d - 1).rev() {
        last_fastest[a] = last_fastest[a + 1] * dims[a + 1];
    }
    // Walk the destination order, reading with the source strides.
    let (read, order): (&[usize], Vec<usize>) = if to_crate {
        (&first_fastest, (0..d).rev().collect())
    } else {
        (&last_fastest, (0..d).collect())
    };
    let mut c = vec![0usize; d];
    let mut out = Vec::with_capacity(src.len());
    for _ in 0..src.len() {
        out.push(src[c.iter().zip(read).map(|(i, s)| i * s).sum::<usize>()]);
        for &a in &order {
            c[a] += 1;
            if c[a] < dims[a] {
                break;
            }
            c[a] = 0;
        }
    }
    out
}

pub fn parse(path: &Path, bytes: &[u8]) -> Result<NiftiVolume> {
    if bytes.len() < HEADER_SIZE {
        return Err(malformed(
            path,
            format!("{} bytes, header needs {HEADER_SIZE}", bytes.len()),
        ));
    }
    let sizeof_hdr = i32_at(bytes, 0);
    if sizeof_hdr != HEADER_SIZE as i32 {
        if sizeof_hdr.swap_bytes() == HEADER_SIZE as i32 {
            return Err(unsupported(path, "sizeof_hdr: big-endian byte order"));
        }
        return Err(malformed(path, format!("sizeof_hdr = {sizeof_hdr}")));
    }
    match &bytes[344..348] {
        b"n+1\0" => {}
        b"ni1\0" => return Err(unsupported(path, "magic: two-file (.hdr/.img) storage")),
        other => return Err(malformed(path, format!("magic {other:?}"))),
    }
    let dim: Vec<i16> = (0..8).map(|k| i16_at(bytes, 40 + 2 * k)).collect();
    let datatype = i16_at(bytes, 70);
    let bitpix = i16_at(bytes, 72);
    let pixdim: Vec<f32> = (0..8).map(|k| f32_at(bytes, 76 + 4 * k)).collect();
    let vox_offset = f32_at(bytes, 108);
    let scl_slope = f32_at(bytes, 112);
    let scl_inter = f32_at(bytes, 116);

    let (spatial, ncomp) = match dim[0] {
        2 | 3 => (dim[0] as usize, 1usize),
        5 if dim[4] == 1 && (dim[5] == 2 || dim[5] == 3) => (3usize, dim[5] as usize),
        5 => return Err(unsupported(path, format!("dim: vector layout {:?}", &dim[..6]))),
        n => return Err(unsupported(path, format!("dim[0] = {n}"))),
    };
    let mut dims: Vec<usize> = Vec::with_capacity(spatial);
    for &n in &dim[1..=spatial] {
        if n < 1 {
            return Err(malformed(path, format!("dim = {dim:?}")));
        }
        dims.push(n as usize);
    }
    // 2D grids are stored with a singleton third axis.
    if dims.len() == 3 && dims[2] == 1 {
        dims.pop();
    }
    if ncomp > 1 && ncomp != dims.len() {
        return Err(unsupported(
            path,
            format!("dim[5] = {ncomp} components for a {}-dimensional grid", dims.len()),
        ));
    }
    let spacing: Vec<f64> = (0..dims.len())
        .map(|a| {
            let h = pixdim[a + 1].abs() as f64;
            if h > 0.0 && h.is_finite() {
                h
            } else {
                1.0
            }
        })
        .collect();
    let shape = GridShape::with_spacing(&dims, &spacing).map_err(|e| malformed(path, e.to_string()))?;

    let width = match (datatype, bitpix) {
        (DT_FLOAT32, 32) => 4usize,
        (DT_INT16, 16) => 2usize,
        (DT_FLOAT32, b) | (DT_INT16, b) => return Err(malformed(path, format!("bitpix {b} for datatype {datatype}"))),
        (dt, _) => return Err(unsupported(path, format!("datatype = {dt}"))),
    };
    if bytes.len() >= VOX_OFFSET && bytes[348] != 0 {
        return Err(unsupported(path, "extension: header extensions present"));
    }
    if !(vox_offset.is_finite() && vox_offset >= HEADER_SIZE as f32 && vox_offset.fract() == 0.0) {
        return Err(malformed(path, format!("vox_offset = {vox_offset}")));
    }
    let offset = vox_offset as usize;
    let count = shape.len() * ncomp;
    let needed = offset + count * width;
    if bytes.len() < needed {
        return Err(malformed(
            path,
            format!("truncated payload: {} bytes, need {needed}", bytes.len()),
        ));
    }
    let data = &bytes[offset..needed];
    let raw: Vec<f32> = match datatype {
        DT_FLOAT32 => data
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect(),
        _ => data
            .chunks_exact(2)
            .map(|b| i16::from_le_bytes([b[0], b[1]]) as f32)
            .collect(),
    };
    let rescale = scl_slope != 0.0 && scl_slope.is_finite() && !(scl_slope == 1.0 && scl_inter == 0.0);
    let scaled: Vec<f32> = if rescale {
        raw.iter().map(|&v| v * scl_slope + scl_inter).collect()
    } else {
        raw
    };
    let components = scaled
        .chunks_exact(shape.len())
        .map(|c| reorder(c, shape.dims(), true))
        .collect();
    Ok(NiftiVolume { shape, components })
}

pub fn read(path: &Path) -> Result<NiftiVolume> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    if path.extension().is_some_and(|e| e == "gz") {
        return Err(unsupported(path, "compression: gzip"));
    }
    parse(path, &fs::read(path)?)
}

/// Serializes a float32 `.nii` with no extensions.
pub fn encode(shape: &GridShape, components: &[Vec<f32>]) -> Vec<u8> {
    let mut h = vec![0u8; VOX_OFFSET];
    let put_i16 = |h: &mut Vec<u8>, off: usize, v: i16| h[off..off + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |h: &mut Vec<u8>, off: usize, v: f32| h[off..off + 4].copy_from_slice(&v.to_le_bytes());
    h[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    let dims = shape.dims();
    let mut dim = [1i16; 8];
    if components.len() == 1 {
        dim[0] = dims.len() as i16;
    } else {
        dim[0] = 5;
        dim[5] = components.len() as i16;
        put_i16(&mut h, 68, INTENT_VECTOR);
    }
    for (a, &n) in dims.iter().enumerate() {
        dim[a + 1] = n as i16;
    }
    for (k, &d) in dim.iter().enumerate() {
        put_i16(&mut h, 40 + 2 * k, d);
    }
    put_i16(&mut h, 70, DT_FLOAT32);
    put_i16(&mut h, 72, 32);
    let mut pixdim = [1.0f32; 8];
    for (a, &s) in shape.spacing().iter().enumerate() {
        pixdim[a + 1] = s as f32;
    }
    for (k, &p) in pixdim.iter().enumerate() {
        put_f32(&mut h, 76 + 4 * k, p);
    }
    put_f32(&mut h, 108, VOX_OFFSET as f32);
    put_f32(&mut h, 112, 1.0);
    h[344..348].copy_from_slice(b"n+1\0");
    for c in components {
        for v in reorder(c, dims, false) {
            h.extend_from_slice(&v.to_le_bytes());
        }
    }
    h
}

pub fn write(path: &Path, shape: &GridShape, components: &[Vec<f32>]) -> Result<()> {
    fs::write(path, encode(shape, components))?;
    Ok(())
}
