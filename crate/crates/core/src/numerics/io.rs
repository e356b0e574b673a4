//! Binary tensor records and name-indexed archives.
//!
//! Tensor record (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  "TNSR"
//! dtype   u8       1 = f32, 2 = f64
//! rank    u32
//! shape   rank × u64
//! data    product(shape) elements, little-endian
//! ```
//!
//! Archive: `"TNLA"`, format version `u32`, manifest length `u64`, manifest
//! (UTF-8 JSON), entry count `u32`, then per entry `name_len u32`, name,
//! `offset u64`, `len u64` (relative to the start of the record section),
//! followed by the concatenated tensor records.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::scalar::{DType, Scalar};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"TNSR";
pub const ARCHIVE_MAGIC: &[u8; 4] = b"TNLA";
pub const ARCHIVE_VERSION: u32 = 1;

pub fn encode_tensor<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(9 + 8 * t.rank() + t.size_bytes());
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(T::DTYPE.tag());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &s in t.shape() {
        out.extend_from_slice(&(s as u64).to_le_bytes());
    }
    for &x in t.data() {
        x.write_le(&mut out);
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated: need {n} bytes at offset {}", self.at)))?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Reads the dtype tag of an encoded record without decoding it.
pub fn peek_dtype(bytes: &[u8]) -> Result<DType> {
    if bytes.len() < 5 || &bytes[..4] != TENSOR_MAGIC {
        return Err(Error::Format("missing tensor magic".into()));
    }
    DType::from_tag(bytes[4]).ok_or_else(|| Error::Format(format!("unknown dtype tag {}", bytes[4])))
}

pub fn decode_tensor<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let dtype = peek_dtype(bytes)?;
    if dtype != T::DTYPE {
        return Err(Error::Format(format!("record holds {dtype}, expected {}", T::DTYPE)));
    }
    let mut cur = Cursor { buf: bytes, at: 5 };
    let rank = cur.u32()? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(cur.u64()? as usize);
    }
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &s| acc.checked_mul(s))
        .ok_or_else(|| Error::Format("shape overflows".into()))?;
    let width = dtype.size_of();
    let raw = cur.take(count.checked_mul(width).ok_or_else(|| Error::Format("size overflows".into()))?)?;
    if cur.at != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after tensor", bytes.len() - cur.at)));
    }
    let data = raw.chunks_exact(width).map(T::read_le).collect();
    Tensor::new(&shape, data)
}

pub fn write_tensor<T: Scalar>(w: &mut impl Write, t: &Tensor<T>) -> Result<()> {
    w.write_all(&encode_tensor(t))?;
    Ok(())
}

pub fn read_tensor<T: Scalar>(r: &mut impl Read) -> Result<Tensor<T>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    decode_tensor(&buf)
}

pub fn save_tensor<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    fs::write(path, encode_tensor(t))?;
    Ok(())
}

pub fn load_tensor<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    decode_tensor(&fs::read(path)?)
}

/// A JSON manifest plus named tensor records.
#[derive(Debug, Clone, Default)]
pub struct Archive {
    manifest: String,
    records: BTreeMap<String, Vec<u8>>,
}

impl Archive {
    pub fn new(manifest: impl Into<String>) -> Self {
        Self { manifest: manifest.into(), records: BTreeMap::new() }
    }

    pub fn manifest(&self) -> &str {
        &self.manifest
    }

    pub fn insert<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.records.insert(name.into(), encode_tensor(t));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.records.keys().map(String::as_str)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.records.contains_key(name)
    }

    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        let bytes = self.records.get(name).ok_or_else(|| Error::Format(format!("archive has no tensor `{name}`")))?;
        decode_tensor(bytes)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(ARCHIVE_MAGIC);
        out.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(self.manifest.as_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, rec) in &self.records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&(rec.len() as u64).to_le_bytes());
            offset += rec.len() as u64;
        }
        for rec in self.records.values() {
            out.extend_from_slice(rec);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { buf: bytes, at: 0 };
        if cur.take(4)? != ARCHIVE_MAGIC {
            return Err(Error::Format("missing archive magic".into()));
        }
        let version = cur.u32()?;
        if version != ARCHIVE_VERSION {
            return Err(Error::Format(format!("unsupported archive version {version}")));
        }
        let mlen = cur.u64()? as usize;
        let manifest = std::str::from_utf8(cur.take(mlen)?)
            .map_err(|e| Error::Format(format!("manifest is not UTF-8: {e}")))?
            .to_owned();
        let count = cur.u32()? as usize;
        let mut toc = Vec::with_capacity(count);
        for _ in 0..count {
            let nlen = cur.u32()? as usize;
            let name = std::str::from_utf8(cur.take(nlen)?)
                .map_err(|e| Error::Format(format!("entry name is not UTF-8: {e}")))?
                .to_owned();
            toc.push((name, cur.u64()? as usize, cur.u64()? as usize));
        }
        let section = &bytes[cur.at..];
        let mut records = BTreeMap::new();
        for (name, offset, len) in toc {
            let rec = offset
                .checked_add(len)
                .and_then(|end| section.get(offset..end))
                .ok_or_else(|| Error::Format(format!("entry `{name}` points outside the archive")))?;
            records.insert(name, rec.to_vec());
        }
        Ok(Self { manifest, records })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;
    use proptest::prelude::*;

    #[test]
    fn record_layout_is_fixed() {
        let t = Tensor::<f32>::new(&[2], vec![1.0, -2.0]).unwrap();
        let bytes = encode_tensor(&t);
        assert_eq!(&bytes[..4], b"TNSR");
        assert_eq!(bytes[4], 1);
        assert_eq!(&bytes[5..9], &1u32.to_le_bytes());
        assert_eq!(&bytes[9..17], &2u64.to_le_bytes());
        assert_eq!(&bytes[17..21], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 25);
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let bytes = encode_tensor(&Tensor::<f32>::ones(&[3]));
        assert!(decode_tensor::<f64>(&bytes).is_err());
        assert!(decode_tensor::<f32>(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn archive_round_trip() {
        let mut rng = SeededRng::new(2);
        let a: Tensor = rng.normal(&[3, 5], 0.0, 1.0);
        let b: Tensor<f32> = rng.normal(&[7], 0.0, 1.0);
        let mut ar = Archive::new(r#"{"hello":1}"#);
        ar.insert("a", &a);
        ar.insert("nested.b", &b);
        let back = Archive::from_bytes(&ar.to_bytes()).unwrap();
        assert_eq!(back.manifest(), r#"{"hello":1}"#);
        assert_eq!(back.tensor::<f64>("a").unwrap(), a);
        assert_eq!(back.tensor::<f32>("nested.b").unwrap(), b);
        assert!(back.tensor::<f64>("missing").is_err());
    }

    proptest! {
        #[test]
        fn tensor_records_round_trip(shape in prop::collection::vec(1usize..5, 0..4), seed in 0u64..1000) {
            let t: Tensor = SeededRng::new(seed).normal(&shape, 0.0, 3.0);
            prop_assert_eq!(decode_tensor::<f64>(&encode_tensor(&t)).unwrap(), t);
        }
    }
}
