//! Binary container for named tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "MANERFCK"
//! version u32      1
//! count   u64      number of entries
//! entry:  u32 name_len | name bytes (utf-8) | u32 rank | u64 extents[rank]
//!         | f64 values[product(extents)] (raw LE bits)
//! ```
//!
//! Values round-trip bit-exactly; the same byte stream decodes to the same
//! tensors on any platform.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use super::Tensor;

pub const MAGIC: &[u8; 8] = b"MANERFCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DecodeError {
    BadMagic,
    UnsupportedVersion(u32),
    Truncated,
    BadName,
}

impl fmt::Display for DecodeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DecodeError::BadMagic => write!(f, "not a checkpoint file (bad magic)"),
            DecodeError::UnsupportedVersion(v) => write!(f, "unsupported checkpoint version {v}"),
            DecodeError::Truncated => write!(f, "checkpoint data ends mid-record"),
            DecodeError::BadName => write!(f, "checkpoint entry name is not valid utf-8"),
        }
    }
}

impl core::error::Error for DecodeError {}

pub fn encode<'a>(entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Vec<u8> {
    let entries: Vec<(&str, &Tensor)> = entries.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in &t.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        if self.pos + n > self.buf.len() {
            return Err(DecodeError::Truncated);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>, DecodeError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(DecodeError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(DecodeError::UnsupportedVersion(version));
    }
    let count = r.u64()?;
    let mut entries = Vec::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = core::str::from_utf8(r.take(name_len)?)
            .map_err(|_| DecodeError::BadName)?
            .into();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 8)?;
        let mut data = Vec::with_capacity(numel);
        for chunk in raw.chunks_exact(8) {
            data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        entries.push((name, Tensor::from_vec(data, &shape)));
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn round_trip_is_bit_exact() {
        let a = Tensor::from_vec(vec![1.0, -2.5, 1e-300, f64::MIN_POSITIVE, 0.1 + 0.2], &[5]);
        let b = Tensor::from_vec(vec![3.0; 6], &[2, 3, 1]);
        let bytes = encode([("alpha", &a), ("beta/w", &b)]);
        let back = decode(&bytes).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].0, "alpha");
        assert_eq!(back[0].1.shape, a.shape);
        for (x, y) in back[0].1.data.iter().zip(&a.data) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert_eq!(back[1].0, "beta/w");
        assert_eq!(back[1].1.shape, vec![2, 3, 1]);
    }

    #[test]
    fn rejects_bad_magic() {
        assert_eq!(decode(b"NOTACKPT........"), Err(DecodeError::BadMagic));
    }

    #[test]
    fn rejects_truncation() {
        let bytes = encode([("x", &Tensor::from_vec(vec![1.0, 2.0], &[2]))]);
        assert_eq!(decode(&bytes[..bytes.len() - 3]), Err(DecodeError::Truncated));
    }

    #[test]
    fn rejects_future_version() {
        let mut bytes = encode([("x", &Tensor::scalar(1.0))]);
        bytes[8] = 99;
        assert_eq!(decode(&bytes), Err(DecodeError::UnsupportedVersion(99)));
    }
}
