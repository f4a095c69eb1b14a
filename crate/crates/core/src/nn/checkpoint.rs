//! Binary checkpoint of named `f32` arrays.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"DDCK"
//! version u32
//! kind    u32 length + UTF-8 bytes
//! count   u32
//! count x { name: u32 length + UTF-8, ndim: u32, dims: ndim x u64, data: prod(dims) x f32 }
//! ```
//!
//! Hyperparameters live in a JSON sidecar next to the binary file.

use std::fs;
use std::path::{Path, PathBuf};

use super::{ParamStore, Scalar};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DDCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub arrays: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn from_params<S: Scalar>(kind: &str, params: &ParamStore<S>) -> Self {
        let arrays = params
            .entries()
            .iter()
            .map(|e| NamedArray {
                name: e.name.clone(),
                shape: e.shape.clone(),
                data: params.get(e.slot).iter().map(|v| v.to_f32().unwrap()).collect(),
            })
            .collect();
        Self {
            kind: kind.to_string(),
            arrays,
        }
    }

    /// Copies arrays into `params`, matching by name and shape.
    pub fn load_into<S: Scalar>(&self, params: &mut ParamStore<S>) -> Result<()> {
        if self.arrays.len() != params.entries().len() {
            return Err(Error::Format(format!(
                "checkpoint has {} arrays, model expects {}",
                self.arrays.len(),
                params.entries().len()
            )));
        }
        let entries = params.entries().to_vec();
        for e in entries {
            let a = self
                .get(&e.name)
                .ok_or_else(|| Error::Format(format!("checkpoint is missing array {}", e.name)))?;
            if a.shape != e.shape {
                return Err(Error::Format(format!(
                    "array {} has shape {:?}, model expects {:?}",
                    e.name, a.shape, e.shape
                )));
            }
            let dst = &mut params.values_mut()[e.slot.range()];
            dst.iter_mut().zip(&a.data).for_each(|(d, s)| *d = S::lit(*s as f64));
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.kind);
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for a in &self.arrays {
            put_str(&mut out, &a.name);
            out.extend_from_slice(&(a.shape.len() as u32).to_le_bytes());
            for &d in &a.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &a.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let kind = r.string()?;
        let count = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let raw = r.take(
                len.checked_mul(4)
                    .ok_or_else(|| Error::Format("array too large".into()))?,
            )?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            arrays.push(NamedArray { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { kind, arrays })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

/// Path of the JSON hyperparameter sidecar for a checkpoint file.
pub fn sidecar_path(path: impl AsRef<Path>) -> PathBuf {
    let mut p = path.as_ref().as_os_str().to_owned();
    p.push(".json");
    PathBuf::from(p)
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("unexpected end of checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("invalid UTF-8 name".into()))
    }
}
