use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{DType, Real};
use crate::tensor::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"MMKPT1";

/// Layout: magic, u32 entry count, per entry (u32 name length, name, u8 dtype,
/// u32 rank, u32 extents), then every payload little-endian in manifest order.
pub fn save_checkpoint<T: Real>(path: &Path, params: &ParamStore<T>) -> Result<()> {
    let mut buf = Vec::with_capacity(64 + params.num_elements() * T::DTYPE.size());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.names().zip(params.tensors()) {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(T::DTYPE.code());
        buf.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &n in t.shape() {
            buf.extend_from_slice(&(n as u32).to_le_bytes());
        }
    }
    for t in params.tensors() {
        for &v in t.data() {
            v.write_le(&mut buf);
        }
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.path, "truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

/// Read a checkpoint, converting the stored dtype to `T`.
pub fn load_checkpoint<T: Real>(path: &Path) -> Result<ParamStore<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { bytes: &bytes, pos: 0, path };
    if r.take(6)? != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "bad magic"));
    }
    let count = r.u32()?;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::format(path, "parameter name is not UTF-8"))?
            .to_string();
        let code = r.take(1)?[0];
        let dtype = DType::from_code(code).ok_or_else(|| Error::format(path, format!("unknown dtype code {code}")))?;
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        entries.push((name, dtype, shape));
    }
    let mut store = ParamStore::new();
    for (name, dtype, shape) in entries {
        let n: usize = shape.iter().product();
        let raw = r.take(n * dtype.size())?;
        let data: Vec<T> = match dtype {
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| T::from_f32(f32::from_le_bytes(c.try_into().unwrap())).unwrap())
                .collect(),
            DType::F64 => raw
                .chunks_exact(8)
                .map(|c| T::from_f64(f64::from_le_bytes(c.try_into().unwrap())).unwrap())
                .collect(),
        };
        let t = Tensor::new(shape, data).map_err(|e| Error::format(path, format!("parameter {name}: {e}")))?;
        if store.find(&name).is_some() {
            return Err(Error::format(path, format!("duplicate parameter {name}")));
        }
        store.add(name, t);
    }
    if r.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after payload"));
    }
    Ok(store)
}
