//! Versioned binary parameter bundle.
//!
//! Layout (little endian):
//! `b"SQRKCKPT"`, `u32` version, `u32` tensor count, then per tensor
//! `u32` name length, UTF-8 name, `u32` rank, `u64` dims, `f64` data
//! (row-major); finally the 32-byte SHA-256 of everything before it.

use std::io::{Read, Write};

use sha2::{Digest, Sha256};

use super::params::ParamStore;
use super::tensor::Tensor;
use super::AutodiffError;

const MAGIC: &[u8; 8] = b"SQRKCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(params: &ParamStore) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (_, p) in params.iter() {
        let name = p.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name);
        buf.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for &d in p.value.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in p.value.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

pub fn write_checkpoint<W: Write>(params: &ParamStore, mut w: W) -> Result<(), AutodiffError> {
    w.write_all(&encode_checkpoint(params))?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], AutodiffError> {
        if self.pos + n > self.buf.len() {
            return Err(AutodiffError::Checkpoint("truncated bundle".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32, AutodiffError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, AutodiffError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor)>, AutodiffError> {
    if bytes.len() < MAGIC.len() + 8 + 32 {
        return Err(AutodiffError::Checkpoint("bundle too short".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(AutodiffError::Checkpoint("checksum mismatch".into()));
    }
    let mut c = Cursor { buf: body, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(AutodiffError::Checkpoint("bad magic".into()));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(AutodiffError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = c.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = String::from_utf8(c.take(len)?.to_vec())
            .map_err(|_| AutodiffError::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = c.u32()? as usize;
        let shape = (0..rank)
            .map(|_| c.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let data = c
            .take(n * 8)?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if c.pos != body.len() {
        return Err(AutodiffError::Checkpoint("trailing bytes after last tensor".into()));
    }
    Ok(out)
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>, AutodiffError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamStore {
        let mut s = ParamStore::new();
        s.add(
            "emb",
            Tensor::matrix(2, 3, vec![0.1, -2.0, 3.5, 1e-300, f64::MAX, 0.0]).unwrap(),
        );
        s.add("bias", Tensor::scalar(-0.25));
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = sample();
        let decoded = decode_checkpoint(&encode_checkpoint(&s)).unwrap();
        let mut t = sample();
        t.iter_mut()
            .for_each(|p| p.value.data_mut().iter_mut().for_each(|x| *x = 0.0));
        t.load_values(decoded).unwrap();
        assert_eq!(s, t);
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = encode_checkpoint(&sample());
        bytes[20] ^= 1;
        let err = decode_checkpoint(&bytes).unwrap_err();
        assert!(err.to_string().contains("checksum"));
    }

    #[test]
    fn shape_mismatch_on_load_is_rejected() {
        let decoded = decode_checkpoint(&encode_checkpoint(&sample())).unwrap();
        let mut other = ParamStore::new();
        other.add("emb", Tensor::zeros(&[3, 2]));
        other.add("bias", Tensor::scalar(0.0));
        assert!(other.load_values(decoded).is_err());
    }
}
