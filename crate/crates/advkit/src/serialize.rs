//! Binary weight container and raw float-array files.
//!
//! Named tensors use a small tagged format ("ADVW", version, count, then
//! name/dtype/shape/payload per entry, everything little-endian). Raw files
//! are bare f32 little-endian sequences; shape travels in the surrounding
//! manifest.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"ADVW";
const VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

#[derive(Debug, thiserror::Error)]
pub enum SerializeError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic {0:?}, not a weight file")]
    BadMagic([u8; 4]),
    #[error("unsupported weight-file version {0}")]
    BadVersion(u32),
    #[error("unsupported dtype tag {0}")]
    BadDtype(u8),
    #[error("file ends inside {0}")]
    Truncated(&'static str),
    #[error("tensor name is not valid utf-8")]
    BadName,
    #[error("tensor {name}: shape {shape:?} does not hold {len} values")]
    BadShape { name: String, shape: Vec<usize>, len: usize },
}

pub fn write_named_tensors(
    path: &Path,
    entries: &[(String, Tensor)],
) -> Result<(), SerializeError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, tensor) in entries {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.push(DTYPE_F64);
        buf.extend_from_slice(&(tensor.ndim() as u32).to_le_bytes());
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        let standard = tensor.as_standard_layout();
        for &v in standard.as_slice().expect("standard layout") {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

pub fn read_named_tensors(path: &Path) -> Result<Vec<(String, Tensor)>, SerializeError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };

    let magic = cur.take::<4>("magic")?;
    if &magic != MAGIC {
        return Err(SerializeError::BadMagic(magic));
    }
    let version = u32::from_le_bytes(cur.take::<4>("version")?);
    if version != VERSION {
        return Err(SerializeError::BadVersion(version));
    }
    let count = u32::from_le_bytes(cur.take::<4>("count")?) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u32::from_le_bytes(cur.take::<4>("name length")?) as usize;
        let name = String::from_utf8(cur.take_vec(name_len, "name")?)
            .map_err(|_| SerializeError::BadName)?;
        let dtype = cur.take::<1>("dtype")?[0];
        if dtype != DTYPE_F64 {
            return Err(SerializeError::BadDtype(dtype));
        }
        let rank = u32::from_le_bytes(cur.take::<4>("rank")?) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(cur.take::<8>("shape")?) as usize);
        }
        let len: usize = shape.iter().product();
        let mut values = Vec::with_capacity(len);
        for _ in 0..len {
            values.push(f64::from_le_bytes(cur.take::<8>("tensor payload")?));
        }
        let tensor = ArrayD::from_shape_vec(IxDyn(&shape), values).map_err(|_| {
            SerializeError::BadShape { name: name.clone(), shape: shape.clone(), len }
        })?;
        out.push((name, tensor));
    }
    Ok(out)
}

pub fn write_f32_raw(path: &Path, values: &[f32]) -> Result<(), SerializeError> {
    let mut buf = Vec::with_capacity(values.len() * 4);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_f32_raw(path: &Path) -> Result<Vec<f32>, SerializeError> {
    let bytes = fs::read(path)?;
    if bytes.len() % 4 != 0 {
        return Err(SerializeError::Truncated("f32 array"));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take<const N: usize>(&mut self, what: &'static str) -> Result<[u8; N], SerializeError> {
        if self.pos + N > self.bytes.len() {
            return Err(SerializeError::Truncated(what));
        }
        let mut out = [0u8; N];
        out.copy_from_slice(&self.bytes[self.pos..self.pos + N]);
        self.pos += N;
        Ok(out)
    }

    fn take_vec(&mut self, n: usize, what: &'static str) -> Result<Vec<u8>, SerializeError> {
        if self.pos + n > self.bytes.len() {
            return Err(SerializeError::Truncated(what));
        }
        let out = self.bytes[self.pos..self.pos + n].to_vec();
        self.pos += n;
        Ok(out)
    }
}
