//! `SRVOL1` volume files: magic, u32×3 extents, f32×3 spacing (mm), u8 dtype
//! (0 = f32 intensity, 1 = u16 labels), little-endian payload, z fastest.

use std::path::Path;

use crate::error::{Error, Result};
use crate::regnet::{DisplacementField, LabelVolume, Volume};
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const VOLUME_MAGIC: &[u8; 6] = b"SRVOL1";
pub const HEADER_BYTES: usize = 6 + 4 * 3 + 4 * 3 + 1;

const DTYPE_F32: u8 = 0;
const DTYPE_U16: u8 = 1;

fn header(dims: [usize; 3], spacing: [f64; 3], dtype: u8, payload: usize) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_BYTES + payload);
    buf.extend_from_slice(VOLUME_MAGIC);
    for n in dims {
        buf.extend_from_slice(&(n as u32).to_le_bytes());
    }
    for s in spacing {
        buf.extend_from_slice(&(s as f32).to_le_bytes());
    }
    buf.push(dtype);
    buf
}

fn write(path: &Path, buf: Vec<u8>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Intensities are stored as f32.
pub fn write_volume<T: Real>(path: &Path, v: &Volume<T>) -> Result<()> {
    let data = v.tensor().data();
    let mut buf = header(v.dims(), v.spacing(), DTYPE_F32, 4 * data.len());
    for &x in data {
        buf.extend_from_slice(&x.to_f32().unwrap().to_le_bytes());
    }
    write(path, buf)
}

pub fn write_labels(path: &Path, v: &LabelVolume) -> Result<()> {
    let mut buf = header(v.dims(), v.spacing(), DTYPE_U16, 2 * v.num_voxels());
    for &l in v.labels() {
        buf.extend_from_slice(&l.to_le_bytes());
    }
    write(path, buf)
}

struct Raw {
    dims: [usize; 3],
    spacing: [f64; 3],
    dtype: u8,
    payload: Vec<u8>,
}

fn read_raw(path: &Path) -> Result<Raw> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < HEADER_BYTES {
        return Err(Error::format(path, format!("file of {} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..6] != VOLUME_MAGIC {
        return Err(Error::format(path, "bad magic"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let dims = [0, 1, 2].map(|a| u32_at(6 + 4 * a) as usize);
    let spacing = [0, 1, 2].map(|a| f32_at(18 + 4 * a) as f64);
    let dtype = bytes[30];
    let elem = match dtype {
        DTYPE_F32 => 4,
        DTYPE_U16 => 2,
        other => return Err(Error::format(path, format!("unknown dtype code {other}"))),
    };
    let expected = dims
        .iter()
        .try_fold(elem, |acc: usize, &n| acc.checked_mul(n))
        .ok_or_else(|| Error::format(path, format!("extents {dims:?} overflow")))?;
    if dims.iter().any(|&n| n == 0) {
        return Err(Error::format(path, format!("zero extent in {dims:?}")));
    }
    let payload = bytes[HEADER_BYTES..].to_vec();
    if payload.len() != expected {
        return Err(Error::format(
            path,
            format!("payload is {} bytes, extents {dims:?} need {expected}", payload.len()),
        ));
    }
    Ok(Raw { dims, spacing, dtype, payload })
}

pub fn read_volume<T: Real>(path: &Path) -> Result<Volume<T>> {
    let raw = read_raw(path)?;
    if raw.dtype != DTYPE_F32 {
        return Err(Error::format(path, "expected an intensity volume, found labels"));
    }
    let data: Vec<T> = raw
        .payload
        .chunks_exact(4)
        .map(|c| T::from_f32(f32::from_le_bytes(c.try_into().unwrap())).unwrap())
        .collect();
    let t = Tensor::new(raw.dims.to_vec(), data)?;
    Volume::new(t, raw.spacing).map_err(|e| Error::format(path, e.to_string()))
}

/// `num_classes` defaults to `max label + 1`.
pub fn read_labels(path: &Path, num_classes: Option<usize>) -> Result<LabelVolume> {
    let raw = read_raw(path)?;
    if raw.dtype != DTYPE_U16 {
        return Err(Error::format(path, "expected a label volume, found intensities"));
    }
    let labels: Vec<u16> = raw
        .payload
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let k = num_classes.unwrap_or_else(|| labels.iter().copied().max().unwrap_or(0) as usize + 1);
    LabelVolume::new(raw.dims, labels, k, raw.spacing).map_err(|e| Error::format(path, e.to_string()))
}

pub const FIELD_AXES: [&str; 3] = ["x", "y", "z"];

/// Write a field as three intensity volumes `{stem}_x`, `{stem}_y`, `{stem}_z`
/// (component `a` displaces axis `a`).
pub fn write_field<T: Real>(dir: &Path, stem: &str, field: &DisplacementField<T>, spacing: [f64; 3]) -> Result<()> {
    let [h, w, d] = field.dims();
    let n = h * w * d;
    for (a, axis) in FIELD_AXES.iter().enumerate() {
        let comp = Tensor::new(vec![h, w, d], field.tensor().data()[a * n..(a + 1) * n].to_vec())?;
        write_volume(&dir.join(format!("{stem}_{axis}.srvol")), &Volume::new(comp, spacing)?)?;
    }
    Ok(())
}

pub fn read_field<T: Real>(dir: &Path, stem: &str) -> Result<DisplacementField<T>> {
    let mut data = Vec::new();
    let mut dims = None;
    for axis in FIELD_AXES {
        let path = dir.join(format!("{stem}_{axis}.srvol"));
        let v: Volume<T> = read_volume(&path)?;
        if dims.is_some_and(|d| d != v.dims()) {
            return Err(Error::format(path, "field components differ in extent"));
        }
        dims = Some(v.dims());
        data.extend_from_slice(v.tensor().data());
    }
    let [h, w, d] = dims.expect("three components");
    DisplacementField::new(Tensor::new(vec![3, h, w, d], data)?)
}
