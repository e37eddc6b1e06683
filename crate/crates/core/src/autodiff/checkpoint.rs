//! Named-tensor checkpoint container.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes   "TTDSRCKP"
//! version    u32       currently 1
//! n_meta     u32
//!   key_len  u32, key   UTF-8 bytes
//!   val_len  u32, value UTF-8 bytes
//! n_tensors  u32
//!   name_len u32, name  UTF-8 bytes
//!   ndim     u32
//!   dims     u64 x ndim
//!   data     f64 (IEEE-754 LE) x product(dims), row-major
//! ```
//!
//! Entries keep their insertion order, so saving the same model twice yields
//! identical bytes.

use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"TTDSRCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub metadata: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

fn malformed<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Checkpoint(msg.into()))
}

impl Checkpoint {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(MAGIC)?;
        out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        write_u32(&mut out, self.metadata.len())?;
        for (k, v) in &self.metadata {
            write_str(&mut out, k)?;
            write_str(&mut out, v)?;
        }
        write_u32(&mut out, self.tensors.len())?;
        for (name, t) in &self.tensors {
            write_str(&mut out, name)?;
            write_u32(&mut out, t.shape().len())?;
            for &d in t.shape() {
                out.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)
            .expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(&mut input, &mut magic)?;
        if &magic != MAGIC {
            return malformed("bad magic bytes");
        }
        let version = read_u32(&mut input)?;
        if version != CHECKPOINT_VERSION {
            return malformed(format!("unsupported checkpoint version {version}"));
        }
        let n_meta = read_u32(&mut input)?;
        let mut metadata = Vec::with_capacity(n_meta.min(1024) as usize);
        for _ in 0..n_meta {
            let k = read_str(&mut input)?;
            let v = read_str(&mut input)?;
            metadata.push((k, v));
        }
        let n_tensors = read_u32(&mut input)?;
        let mut tensors = Vec::with_capacity(n_tensors.min(1024) as usize);
        for _ in 0..n_tensors {
            let name = read_str(&mut input)?;
            let ndim = read_u32(&mut input)? as usize;
            if ndim == 0 || ndim > 8 {
                return malformed(format!("tensor {name} has {ndim} dimensions"));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let mut b = [0u8; 8];
                read_exact(&mut input, &mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n > 0 && n < (1 << 31))
                .ok_or_else(|| {
                    Error::Checkpoint(format!("tensor {name} has bad shape {shape:?}"))
                })?;
            let mut raw = vec![0u8; n * 8];
            read_exact(&mut input, &mut raw)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        Ok(Self { metadata, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(bytes.as_slice())
    }
}

fn write_u32<W: Write>(out: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("count {v} exceeds u32")))?;
    out.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_str<W: Write>(out: &mut W, s: &str) -> Result<()> {
    write_u32(out, s.len())?;
    out.write_all(s.as_bytes())?;
    Ok(())
}

fn read_exact<R: Read>(input: &mut R, buf: &mut [u8]) -> Result<()> {
    input.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Checkpoint("truncated checkpoint".into()),
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(input, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_str<R: Read>(input: &mut R) -> Result<String> {
    let len = read_u32(input)? as usize;
    if len > 1 << 20 {
        return malformed(format!("string of {len} bytes"));
    }
    let mut buf = vec![0u8; len];
    read_exact(input, &mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Checkpoint("string is not UTF-8".into()))
}
