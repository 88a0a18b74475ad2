//! Flat little-endian tensor dump: `DUT1`, four `u32` dims, `f32` payload.

use std::io::{Read, Write};
use std::path::Path;

use super::{Float, Shape, Tensor};
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"DUT1";

pub fn write_tensor<T: Float, W: Write>(t: &Tensor<T>, mut w: W) -> std::io::Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    for d in t.shape().0 {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.numel() * 4);
    for v in t.data() {
        buf.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
    }
    w.write_all(&buf)
}

/// Reads one tensor record. A short read or bad magic is an integrity error.
pub fn read_tensor<T: Float, R: Read>(mut r: R) -> Result<Tensor<T>> {
    let mut head = [0u8; 20];
    r.read_exact(&mut head).map_err(|_| Error::Integrity("truncated tensor header".into()))?;
    if &head[..4] != TENSOR_MAGIC {
        return Err(Error::Integrity("bad tensor magic".into()));
    }
    let mut dims = [0usize; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        let b = &head[4 + 4 * i..8 + 4 * i];
        *d = u32::from_le_bytes(b.try_into().expect("four bytes")) as usize;
    }
    let shape = Shape(dims);
    let bytes = shape
        .numel()
        .checked_mul(4)
        .ok_or_else(|| Error::Integrity("tensor shape overflows".into()))?;
    let mut payload = Vec::new();
    r.take(bytes as u64)
        .read_to_end(&mut payload)
        .map_err(|_| Error::Integrity("unreadable tensor payload".into()))?;
    if payload.len() != bytes {
        return Err(Error::Integrity(format!(
            "truncated tensor payload: expected {bytes} bytes, found {}",
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| T::from_f64(f32::from_le_bytes(c.try_into().expect("four bytes")) as f64))
        .collect();
    Tensor::from_vec(shape, data)
}

pub fn save_tensor<T: Float>(t: &Tensor<T>, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    write_tensor(t, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_tensor<T: Float>(path: &Path) -> Result<Tensor<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_tensor(bytes.as_slice())
}
