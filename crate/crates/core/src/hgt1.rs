//! HGT1 binary tensor files.
//!
//! Layout (little-endian):
//!
//! ```text
//! b"HGT1" | u8 version = 1 | u8 dtype (0 = f32, 1 = f64) | u32 ndim
//!        | ndim × u32 dims | row-major payload
//! ```

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"HGT1";
pub const VERSION: u8 = 1;
const MAX_ELEMENTS: u64 = 1 << 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
}

impl Dtype {
    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            other => Err(Error::Format(format!("unknown HGT1 dtype {other}"))),
        }
    }
}

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor, dtype: Dtype) -> io::Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&[VERSION, dtype as u8])?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.numel() * 8);
    match dtype {
        Dtype::F32 => t.data().iter().for_each(|&v| buf.extend_from_slice(&(v as f32).to_le_bytes())),
        Dtype::F64 => t.data().iter().for_each(|&v| buf.extend_from_slice(&v.to_le_bytes())),
    }
    w.write_all(&buf)
}

pub fn encode(t: &Tensor, dtype: Dtype) -> Vec<u8> {
    let mut out = Vec::new();
    write_tensor(&mut out, t, dtype).expect("writing to a Vec cannot fail");
    out
}

pub(crate) fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &'static str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::Truncated(what),
        _ => Error::Format(format!("{what}: {e}")),
    })
}

pub(crate) fn read_u32<R: Read>(r: &mut R, what: &'static str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads one tensor, returning it with the dtype it was stored as.
pub fn read_tensor<R: Read>(r: &mut R) -> Result<(Tensor, Dtype)> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, "HGT1 magic")?;
    if magic != MAGIC {
        return Err(Error::BadMagic {
            expected: MAGIC,
            found: magic,
        });
    }
    let mut head = [0u8; 2];
    read_exact(r, &mut head, "HGT1 header")?;
    if head[0] != VERSION {
        return Err(Error::Format(format!("unsupported HGT1 version {}", head[0])));
    }
    let dtype = Dtype::from_byte(head[1])?;
    let ndim = read_u32(r, "HGT1 rank")? as usize;
    if ndim == 0 || ndim > 16 {
        return Err(Error::Format(format!("HGT1 rank {ndim} out of range")));
    }
    let mut shape = Vec::with_capacity(ndim);
    let mut numel: u64 = 1;
    for _ in 0..ndim {
        let d = read_u32(r, "HGT1 dims")?;
        if d == 0 {
            return Err(Error::Format("HGT1 zero extent".into()));
        }
        numel = numel.saturating_mul(d as u64);
        shape.push(d as usize);
    }
    if numel > MAX_ELEMENTS {
        return Err(Error::Format(format!("HGT1 tensor with {numel} elements is too large")));
    }
    let width = match dtype {
        Dtype::F32 => 4,
        Dtype::F64 => 8,
    };
    let mut bytes = vec![0u8; numel as usize * width];
    read_exact(r, &mut bytes, "HGT1 payload")?;
    let data = match dtype {
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Dtype::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    Ok((Tensor::new(shape, data)?, dtype))
}

/// Decodes a buffer holding exactly one tensor.
pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let mut cursor = bytes;
    let (t, _) = read_tensor(&mut cursor)?;
    if !cursor.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes after HGT1 tensor", cursor.len())));
    }
    Ok(t)
}

pub fn save(path: impl AsRef<Path>, t: &Tensor, dtype: Dtype) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(t, dtype)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
