//! Single-file tensor container: a JSON manifest plus named little-endian
//! `f32` blobs, sealed with a SHA-256 trailer.
//!
//! ```text
//! magic "RADMCKPT" | version u32 | manifest_len u64 | manifest JSON
//! | count u32 | { name_len u32 | name | ndim u32 | dims u64* | f32* }*
//! | sha256(all preceding bytes)
//! ```

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"RADMCKPT";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;
const MAX_NDIM: usize = 8;

/// Decoded container contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub manifest: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Container {
    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn encode(manifest: &serde_json::Value, tensors: &[(String, Tensor<f32>)]) -> Vec<u8> {
    encode_with_version(manifest, tensors, FORMAT_VERSION)
}

pub(crate) fn encode_with_version(
    manifest: &serde_json::Value,
    tensors: &[(String, Tensor<f32>)],
    version: u32,
) -> Vec<u8> {
    let json = serde_json::to_vec(manifest).expect("manifest serialization is infallible");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for d in &t.shape {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Malformed(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self, v: u64) -> Result<usize> {
        usize::try_from(v).map_err(|_| Error::Malformed("length overflows usize".into()))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

/// Reads the format version without validating the rest of the file.
pub fn peek_version(bytes: &[u8]) -> Result<u32> {
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(Error::Malformed("missing RADMCKPT magic".into()));
    }
    Ok(u32::from_le_bytes(bytes[8..12].try_into().unwrap()))
}

pub fn decode(bytes: &[u8]) -> Result<Container> {
    let version = peek_version(bytes)?;
    if bytes.len() < 8 + 4 + 8 + DIGEST_LEN {
        return Err(Error::Malformed("file too short".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checksum);
    }
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let mut r = Reader { buf: body, pos: 12 };
    let mlen = r.u64()?;
    let mlen = r.len(mlen)?;
    let manifest: serde_json::Value = serde_json::from_slice(r.take(mlen)?)?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|_| Error::Malformed("tensor name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u32()? as usize;
        if ndim > MAX_NDIM {
            return Err(Error::Malformed(format!("tensor {name}: {ndim} dimensions")));
        }
        let mut shape = Vec::with_capacity(ndim);
        let mut numel: usize = 1;
        for _ in 0..ndim {
            let d = r.u64()?;
            let d = r.len(d)?;
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| Error::Malformed(format!("tensor {name}: size overflow")))?;
            shape.push(d);
        }
        let bytes_needed = numel
            .checked_mul(4)
            .filter(|&b| b <= r.remaining())
            .ok_or_else(|| Error::Malformed(format!("tensor {name}: truncated data")))?;
        let data = r
            .take(bytes_needed)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name, Tensor::new(shape, data)));
    }
    if r.remaining() != 0 {
        return Err(Error::Malformed(format!("{} trailing bytes", r.remaining())));
    }
    Ok(Container { manifest, tensors })
}
