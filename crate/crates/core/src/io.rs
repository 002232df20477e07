//! Little-endian binary tensor files (`RGFT`) and the byte cursor shared with
//! the checkpoint reader.
//!
//! Layout: `b"RGFT"`, `u32` version (1), `u32` rank, `u32` dims\[rank\], then
//! `prod(dims)` `f32` values in row-major order. Nothing may follow the payload.

use std::fs;
use std::path::Path;

use crate::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"RGFT";
pub const TENSOR_VERSION: u32 = 1;

/// Bounds-checked little-endian cursor that reports byte offsets on failure.
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub(crate) fn fail<T>(&self, reason: impl Into<String>) -> Result<T> {
        Err(Error::Format {
            offset: self.offset(),
            reason: reason.into(),
        })
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return self.fail(format!(
                "truncated while reading {what}: need {n} bytes, {} left",
                self.buf.len() - self.pos
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub(crate) fn f64(&mut self, what: &str) -> Result<f64> {
        let b = self.take(8, what)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    pub(crate) fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = n
            .checked_mul(4)
            .ok_or(Error::Format {
                offset: self.offset(),
                reason: format!("{what}: element count overflows"),
            })?;
        let raw = self.take(bytes, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    pub(crate) fn expect_magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != magic {
            self.pos -= 4;
            return self.fail(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(magic)
            ));
        }
        Ok(())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return self.fail(format!("{} trailing bytes", self.buf.len() - self.pos));
        }
        Ok(())
    }
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_f32(out: &mut Vec<u8>, v: f32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn dim_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Argument(format!("{what} = {n} exceeds u32")))
}

/// Dense `f32` tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl RawTensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "dims {dims:?} need {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(12 + 4 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(TENSOR_MAGIC);
        put_u32(&mut out, TENSOR_VERSION);
        put_u32(&mut out, dim_u32(self.dims.len(), "rank")?);
        for &d in &self.dims {
            put_u32(&mut out, dim_u32(d, "dimension")?);
        }
        for &v in &self.data {
            put_f32(&mut out, v);
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(TENSOR_MAGIC)?;
        let version = r.u32("version")?;
        if version != TENSOR_VERSION {
            return Err(Error::Format {
                offset: 4,
                reason: format!("unsupported tensor version {version}"),
            });
        }
        let rank = r.u32("rank")? as usize;
        let mut dims = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            dims.push(r.u32("dimension")? as usize);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or(Error::Format {
                offset: r.offset(),
                reason: "element count overflows".into(),
            })?;
        let data = r.f32s(n, "payload")?;
        r.finish()?;
        Ok(Self { dims, data })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_bad_headers() {
        let t = RawTensor::new(vec![2, 3], (0..6).map(|v| v as f32).collect()).unwrap();
        let mut bytes = t.encode().unwrap();
        assert_eq!(RawTensor::decode(&bytes).unwrap(), t);

        let err = RawTensor::decode(&bytes[..bytes.len() - 2]).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 20, .. }), "{err}");

        bytes[0] = b'X';
        assert!(matches!(
            RawTensor::decode(&bytes),
            Err(Error::Format { offset: 0, .. })
        ));
        bytes[0] = b'R';
        bytes[4] = 9;
        assert!(matches!(
            RawTensor::decode(&bytes),
            Err(Error::Format { offset: 4, .. })
        ));
    }

    #[test]
    fn rejects_trailing_bytes() {
        let mut bytes = RawTensor::new(vec![1], vec![1.0]).unwrap().encode().unwrap();
        bytes.push(0);
        assert!(RawTensor::decode(&bytes).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(dims in prop::collection::vec(1usize..5, 1..4), seed in any::<u32>()) {
            let n: usize = dims.iter().product();
            let data: Vec<f32> = (0..n).map(|i| (i as f32 + seed as f32).sin()).collect();
            let t = RawTensor::new(dims, data).unwrap();
            prop_assert_eq!(RawTensor::decode(&t.encode().unwrap()).unwrap(), t);
        }
    }
}
