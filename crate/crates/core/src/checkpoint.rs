//! Versioned binary checkpoints for quantized model parameters.
//!
//! Layout (all integers big-endian):
//!
//! ```text
//! magic "PSAPCKPT" | version u16 | kind u8 | frac_bits u8
//! meta_len u32 | meta (JSON, UTF-8)
//! tensor_count u32 | { name_len u16 | name | len u32 | len x i64 raw }*
//! sha256 over everything above (32 bytes)
//! ```
//!
//! The trailing digest is the content hash recorded in audit logs.

use std::path::Path;

use crate::error::{Error, Result};
use crate::fixed::{FixedPoint, FRAC_BITS};
use crate::hash::{sha256, Digest256};

const MAGIC: &[u8; 8] = b"PSAPCKPT";
const VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckpointKind {
    Forecaster = 1,
    Policy = 2,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Vec<FixedPoint>)>,
}

impl Checkpoint {
    pub fn new(kind: CheckpointKind, meta: serde_json::Value) -> Self {
        Self { kind, meta, tensors: Vec::new() }
    }

    pub fn push(&mut self, name: &str, values: Vec<FixedPoint>) {
        self.tensors.push((name.to_string(), values));
    }

    pub fn tensor(&self, name: &str) -> Result<&[FixedPoint]> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    }

    /// Tensor with an expected length.
    pub fn tensor_len(&self, name: &str, len: usize) -> Result<Vec<FixedPoint>> {
        let t = self.tensor(name)?;
        if t.len() != len {
            return Err(Error::Checkpoint(format!("tensor {name}: expected {len} values, found {}", t.len())));
        }
        Ok(t.to_vec())
    }

    fn body(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_be_bytes());
        out.push(self.kind as u8);
        out.push(FRAC_BITS as u8);
        let meta = serde_json::to_vec(&self.meta).expect("json value serializes");
        out.extend_from_slice(&(meta.len() as u32).to_be_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_be_bytes());
        for (name, values) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_be_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(values.len() as u32).to_be_bytes());
            for v in values {
                out.extend_from_slice(&v.raw().to_be_bytes());
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.body();
        let digest = sha256(&[&out]);
        out.extend_from_slice(digest.as_bytes());
        out
    }

    pub fn content_hash(&self) -> Digest256 {
        sha256(&[&self.body()])
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 + 2 + 2 + 4 + 4 + 32 {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if sha256(&[body]).as_bytes() != digest {
            return Err(Error::Checkpoint("content hash mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let kind = match r.u8()? {
            1 => CheckpointKind::Forecaster,
            2 => CheckpointKind::Policy,
            k => return Err(Error::Checkpoint(format!("unknown kind {k}"))),
        };
        let frac = r.u8()?;
        if frac as u32 != FRAC_BITS {
            return Err(Error::Checkpoint(format!("quantization scale 2^-{frac} differs from 2^-{FRAC_BITS}")));
        }
        let meta_len = r.u32()? as usize;
        let meta = serde_json::from_slice(r.take(meta_len)?)?;
        let count = r.u32()?;
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let len = r.u32()? as usize;
            let mut values = Vec::with_capacity(len);
            for _ in 0..len {
                values.push(FixedPoint::from_raw(r.i64()?));
            }
            tensors.push((name, values));
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Self { kind, meta, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<Digest256> {
        let path = path.as_ref();
        let bytes = self.to_bytes();
        std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        Ok(Digest256(bytes[bytes.len() - 32..].try_into().expect("32 bytes")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_be_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new(CheckpointKind::Forecaster, serde_json::json!({"k": 8}));
        c.push("w", vec![FixedPoint::from_f64(1.5), FixedPoint::from_raw(-3)]);
        c.push("b", vec![]);
        c
    }

    #[test]
    fn round_trip_and_hash() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.content_hash(), c.content_hash());
        assert_eq!(&bytes[bytes.len() - 32..], c.content_hash().as_bytes());
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = sample().to_bytes();
        bytes[30] ^= 1;
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }

    #[test]
    fn missing_tensor_errors() {
        let c = sample();
        assert!(c.tensor("nope").is_err());
        assert!(c.tensor_len("w", 3).is_err());
        assert_eq!(c.tensor_len("w", 2).unwrap().len(), 2);
    }
}
