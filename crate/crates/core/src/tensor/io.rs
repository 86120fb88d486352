//! `DMT1` binary tensor files: magic, `u32` rank, `u32` dims, then the
//! payload as little-endian `f32`. Everything is little-endian.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{Tensor, MAX_RANK};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DMT1";

pub fn write_tensor_to<W: Write>(mut w: W, t: &Tensor) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + 4 * t.rank() + 4 * t.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor_from<R: Read>(mut r: R) -> Result<Tensor> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode(&bytes)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let file = fs::File::create(path.as_ref())?;
    let mut w = std::io::BufWriter::new(file);
    write_tensor_to(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    decode(&bytes)
}

fn u32_at(bytes: &[u8], at: usize) -> Option<u32> {
    bytes.get(at..at + 4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
}

fn decode(bytes: &[u8]) -> Result<Tensor> {
    let malformed = |m: &str| Error::MalformedHeader(m.to_string());
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(malformed("bad magic"));
    }
    let rank = u32_at(bytes, 4).ok_or_else(|| malformed("missing rank"))? as usize;
    if rank == 0 || rank > MAX_RANK {
        return Err(malformed(&format!("rank {rank} outside 1..={MAX_RANK}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let d = u32_at(bytes, 8 + 4 * i).ok_or_else(|| malformed("missing dims"))?;
        if d == 0 {
            return Err(malformed("zero extent"));
        }
        shape.push(d as usize);
    }
    let header = 8 + 4 * rank;
    let n: usize = shape.iter().product();
    let expected = 4 * n;
    let found = bytes.len() - header;
    if found < expected {
        return Err(Error::TruncatedPayload { expected, found });
    }
    if found > expected {
        return Err(malformed(&format!("{} trailing bytes", found - expected)));
    }
    let data: Vec<f32> = bytes[header..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(malformed("non-finite payload"));
    }
    Ok(Tensor::from_parts(shape, data))
}
