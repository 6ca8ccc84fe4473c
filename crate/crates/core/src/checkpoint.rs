//! HGC1 checkpoint container.
//!
//! ```text
//! b"HGC1" | u32 tensor count
//!         | count × (u16 name length | UTF-8 name | HGT1 blob)
//!         | u32 config length | UTF-8 key=value config text
//! ```
//!
//! Tensors are stored as f64 so parameters round-trip bit-exactly. The
//! epoch counter travels as the tensor `meta.epoch`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::hgt1::{self, read_exact, read_u32, Dtype};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"HGC1";
const EPOCH_KEY: &str = "meta.epoch";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Named parameter tensors in a fixed order.
    pub tensors: IndexMap<String, Tensor>,
    /// Snapshot of the run configuration (`key=value` lines).
    pub config: String,
    pub epoch: u64,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&((self.tensors.len() + 1) as u32).to_le_bytes());
        let epoch = Tensor::scalar(self.epoch as f64);
        for (name, t) in self.tensors.iter().chain([(&EPOCH_KEY.to_string(), &epoch)]) {
            if name.len() > u16::MAX as usize {
                return Err(Error::Format(format!("tensor name `{name}` too long")));
            }
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            hgt1::write_tensor(&mut out, t, Dtype::F64).expect("Vec write");
        }
        out.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, "HGC1 magic")?;
        if magic != MAGIC {
            return Err(Error::BadMagic {
                expected: MAGIC,
                found: magic,
            });
        }
        let count = read_u32(&mut r, "HGC1 tensor count")?;
        let mut tensors = IndexMap::new();
        let mut epoch = None;
        for _ in 0..count {
            let mut len = [0u8; 2];
            read_exact(&mut r, &mut len, "HGC1 name length")?;
            let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
            read_exact(&mut r, &mut name, "HGC1 name")?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let (t, _) = hgt1::read_tensor(&mut r)?;
            if name == EPOCH_KEY {
                if epoch.replace(t.data()[0] as u64).is_some() {
                    return Err(Error::DuplicateName(name));
                }
                continue;
            }
            if tensors.contains_key(&name) {
                return Err(Error::DuplicateName(name));
            }
            tensors.insert(name, t);
        }
        let len = read_u32(&mut r, "HGC1 config length")? as usize;
        if r.len() < len {
            return Err(Error::Truncated("HGC1 config"));
        }
        let mut config = vec![0u8; len];
        r.read_exact(&mut config).expect("length checked");
        if !r.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes after checkpoint", r.len())));
        }
        let config = String::from_utf8(config).map_err(|_| Error::Format("config is not UTF-8".into()))?;
        Ok(Checkpoint {
            tensors,
            config,
            epoch: epoch.unwrap_or(0),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}
