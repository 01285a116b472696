//! CTTN binary tensor container.
//!
//! A single tensor is `b"CTTN"`, `u32` version (1), `u32` rank, `rank × u32`
//! dims, then the little-endian `f32` payload. Archives of named tensors
//! (checkpoints) are `b"CTTA"`, `u32` version, `u32` record count, and per
//! record a `u32` name length, the UTF-8 name and one CTTN tensor.

use std::io::{Read, Write};

use crate::error::{CtError, Result};
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"CTTN";
pub const ARCHIVE_MAGIC: &[u8; 4] = b"CTTA";
pub const VERSION: u32 = 1;

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn write_raw(w: &mut impl Write, dims: &[usize], data: &[f32]) -> Result<()> {
    let numel: usize = dims.iter().product();
    if numel != data.len() {
        return Err(CtError::Format(format!("dims {dims:?} do not match {} values", data.len())));
    }
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(dims.len() as u32).to_le_bytes())?;
    for &d in dims {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(data.len() * 4);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_raw(r: &mut impl Read) -> Result<(Vec<usize>, Vec<f32>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CtError::Format(format!("bad magic {magic:?}")));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(CtError::Format(format!("unsupported version {version}")));
    }
    let rank = read_u32(r)? as usize;
    if rank > 8 {
        return Err(CtError::Format(format!("rank {rank} too large")));
    }
    let dims = (0..rank).map(|_| read_u32(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let numel: usize = dims.iter().product();
    let mut bytes = vec![0u8; numel * 4];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok((dims, data))
}

/// Writes a tensor with rank 4.
pub fn write_tensor(w: &mut impl Write, t: &Tensor<f32>) -> Result<()> {
    write_raw(w, &t.shape().dims(), t.data())
}

/// Reads a tensor of rank ≤ 4, left-padding the dims with ones.
pub fn read_tensor(r: &mut impl Read) -> Result<Tensor<f32>> {
    let (dims, data) = read_raw(r)?;
    if dims.len() > 4 {
        return Err(CtError::Format(format!("rank {} exceeds 4", dims.len())));
    }
    let mut d4 = [1usize; 4];
    d4[4 - dims.len()..].copy_from_slice(&dims);
    Tensor::from_vec(Shape::new(d4[0], d4[1], d4[2], d4[3]), data)
}

pub fn to_bytes(dims: &[usize], data: &[f32]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    write_raw(&mut out, dims, data)?;
    Ok(out)
}

pub fn write_archive<'a>(w: &mut impl Write, records: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>) -> Result<()> {
    let records: Vec<_> = records.into_iter().collect();
    w.write_all(ARCHIVE_MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(records.len() as u32).to_le_bytes())?;
    for (name, t) in records {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        write_tensor(w, t)?;
    }
    Ok(())
}

pub fn read_archive(r: &mut impl Read) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != ARCHIVE_MAGIC {
        return Err(CtError::Format(format!("bad archive magic {magic:?}")));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(CtError::Format(format!("unsupported archive version {version}")));
    }
    let count = read_u32(r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(r)? as usize;
        if len > 4096 {
            return Err(CtError::Format("record name too long".into()));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| CtError::Format(e.to_string()))?;
        out.push((name, read_tensor(r)?));
    }
    Ok(out)
}
