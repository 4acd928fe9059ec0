//! Binary checkpoints.
//!
//! Little-endian layout: magic `DPCK`, `u32` version, 32-byte spec hash,
//! `u64` seed, `u64` tensor count, then per tensor a `u32`-prefixed UTF-8
//! name, `u32` rank, `u64` extents and the `f64` values.

use std::path::Path;

use crate::dictionary::NetworkSpec;
use crate::error::{Error, Result};
use crate::model::{init_model, ModelParams};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DPCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Header {
    pub version: u32,
    pub spec_hash: [u8; 32],
    pub seed: u64,
    pub tensors: u64,
}

pub fn encode(params: &ModelParams, spec: &NetworkSpec, seed: u64) -> Vec<u8> {
    let named = params.named();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&spec.hash());
    out.extend_from_slice(&seed.to_le_bytes());
    out.extend_from_slice(&(named.len() as u64).to_le_bytes());
    for (name, _, t) in named {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated file: needed {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn read_header(r: &mut Reader) -> Result<Header> {
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes; not a checkpoint".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("format version {version}, this build reads {VERSION}")));
    }
    let spec_hash = r.take(32)?.try_into().unwrap();
    Ok(Header {
        version,
        spec_hash,
        seed: r.u64()?,
        tensors: r.u64()?,
    })
}

pub fn header(bytes: &[u8]) -> Result<Header> {
    read_header(&mut Reader { bytes, pos: 0 })
}

/// Decodes a checkpoint for `spec`. Nothing is returned unless the whole
/// file is consistent.
pub fn decode(bytes: &[u8], spec: &NetworkSpec) -> Result<(ModelParams, u64)> {
    let mut r = Reader { bytes, pos: 0 };
    let h = read_header(&mut r)?;
    if h.spec_hash != spec.hash() {
        return Err(Error::Checkpoint("spec hash mismatch: checkpoint was written for a different network".into()));
    }
    let mut params = init_model(spec, 0)?;
    let expected: Vec<(String, Vec<usize>)> = params
        .named()
        .into_iter()
        .map(|(n, _, t)| (n, t.shape().to_vec()))
        .collect();
    if h.tensors != expected.len() as u64 {
        return Err(Error::Checkpoint(format!(
            "{} tensors in file, network has {}",
            h.tensors,
            expected.len()
        )));
    }
    let mut tensors = Vec::with_capacity(expected.len());
    for (name, shape) in &expected {
        let len = r.u32()? as usize;
        let got = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        if got != name {
            return Err(Error::Checkpoint(format!("expected tensor {name}, found {got}")));
        }
        let rank = r.u32()? as usize;
        let mut dims = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            dims.push(r.u64()? as usize);
        }
        if &dims != shape {
            return Err(Error::Checkpoint(format!("tensor {name} has shape {dims:?}, expected {shape:?}")));
        }
        let n: usize = dims.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(r.f64()?);
        }
        tensors.push(Tensor::new(dims, data).map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    for ((_, slot), t) in params.tensors_mut().into_iter().zip(tensors) {
        *slot = t;
    }
    Ok((params, h.seed))
}

pub fn save(path: &Path, params: &ModelParams, spec: &NetworkSpec, seed: u64) -> Result<()> {
    std::fs::write(path, encode(params, spec, seed)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path, spec: &NetworkSpec) -> Result<(ModelParams, u64)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dictionary::SkipKind;

    #[test]
    fn round_trip_is_exact() {
        let spec = NetworkSpec::dense(&[4, 5, 4, 3], 2)
            .with_skip(1, 3, SkipKind::LearnedDense)
            .unwrap();
        let p = init_model(&spec, 11).unwrap();
        let bytes = encode(&p, &spec, 11);
        let (q, seed) = decode(&bytes, &spec).unwrap();
        assert_eq!(seed, 11);
        assert_eq!(p, q);
        for ((_, _, a), (_, _, b)) in p.named().iter().zip(q.named().iter()) {
            let bits_a: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
    }

    #[test]
    fn corruption_is_detected() {
        let spec = NetworkSpec::dense(&[3, 2], 2);
        let p = init_model(&spec, 0).unwrap();
        let mut bytes = encode(&p, &spec, 0);
        assert!(decode(&bytes[..bytes.len() - 3], &spec).is_err());
        let other = NetworkSpec::dense(&[3, 3], 2);
        let err = decode(&bytes, &other).unwrap_err();
        assert!(err.to_string().contains("spec hash"), "{err}");
        bytes[0] = b'X';
        let err = decode(&bytes, &spec).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }
}
