//! Binary container shared by checkpoints and dataset caches.
//!
//! ```text
//! magic "SPRUNE\0\x01" | u32 version | u64 header length | JSON header
//! | payload bytes | u32 CRC-32 of everything before it
//! ```
//! All integers and payload values are little-endian. The header lists every
//! blob by name with its byte offset into the payload and its encoding.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::scalar::{Precision, Scalar};

pub const MAGIC: &[u8; 8] = b"SPRUNE\0\x01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Encoding {
    F32,
    F64,
    U32,
    Bits,
}

impl Encoding {
    fn of_precision(p: Precision) -> Self {
        match p {
            Precision::F32 => Encoding::F32,
            Precision::F64 => Encoding::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub name: String,
    pub encoding: Encoding,
    pub offset: u64,
    pub bytes: u64,
    /// Element count (values, labels, or flag bits).
    pub len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: Value,
    blobs: Vec<Blob>,
}

#[derive(Debug, Default)]
pub struct Writer {
    blobs: Vec<Blob>,
    payload: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, name: &str, encoding: Encoding, len: usize, bytes: &[u8]) {
        self.blobs.push(Blob {
            name: name.to_string(),
            encoding,
            offset: self.payload.len() as u64,
            bytes: bytes.len() as u64,
            len: len as u64,
        });
        self.payload.extend_from_slice(bytes);
    }

    pub fn values<T: Scalar>(&mut self, name: &str, values: &[T]) {
        let mut buf = Vec::with_capacity(values.len() * T::BYTES);
        for &v in values {
            v.write_le(&mut buf);
        }
        self.push(name, Encoding::of_precision(T::PRECISION), values.len(), &buf);
    }

    pub fn u32s(&mut self, name: &str, values: impl ExactSizeIterator<Item = u32>) {
        let len = values.len();
        let buf: Vec<u8> = values.flat_map(|v| v.to_le_bytes()).collect();
        self.push(name, Encoding::U32, len, &buf);
    }

    pub fn bits(&mut self, name: &str, bit_len: usize, packed: &[u8]) {
        self.push(name, Encoding::Bits, bit_len, packed);
    }

    pub fn finish(self, kind: &str, meta: Value) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&Header {
            kind: kind.to_string(),
            meta,
            blobs: self.blobs,
        })?;
        let mut out = Vec::with_capacity(24 + header.len() + self.payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&self.payload);
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }
}

/// A verified container. The checksum is checked before anything is parsed.
#[derive(Debug)]
pub struct Reader {
    kind: String,
    meta: Value,
    blobs: Vec<Blob>,
    payload: Vec<u8>,
    origin: String,
}

impl Reader {
    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let bad = |m: &str| Error::format(origin, m);
        if bytes.len() < MAGIC.len() + 4 + 8 + 4 {
            return Err(bad("truncated container"));
        }
        if &bytes[..8] != MAGIC {
            return Err(bad("not a structprune container (bad magic)"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let header_len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let header_end = 20usize
            .checked_add(header_len)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| bad("header extends past end of file"))?;
        let header: Header = serde_json::from_slice(&body[20..header_end])?;
        let payload = body[header_end..].to_vec();
        for b in &header.blobs {
            let end = b.offset.checked_add(b.bytes).ok_or_else(|| bad("blob range overflows"))?;
            if end > payload.len() as u64 {
                return Err(bad(&format!("blob {} extends past end of payload", b.name)));
            }
        }
        Ok(Reader {
            kind: header.kind,
            meta: header.meta,
            blobs: header.blobs,
            payload,
            origin: origin.to_string(),
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }

    pub fn kind(&self) -> &str {
        &self.kind
    }

    pub fn meta(&self) -> &Value {
        &self.meta
    }

    fn blob(&self, name: &str, encoding: Encoding) -> Result<(&Blob, &[u8])> {
        let b = self
            .blobs
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| Error::format(&self.origin, format!("missing blob {name}")))?;
        if b.encoding != encoding {
            return Err(Error::format(
                &self.origin,
                format!("blob {name} is {:?}, expected {encoding:?}", b.encoding),
            ));
        }
        Ok((b, &self.payload[b.offset as usize..(b.offset + b.bytes) as usize]))
    }

    pub fn values<T: Scalar>(&self, name: &str, expected_len: usize) -> Result<Vec<T>> {
        let (b, bytes) = self.blob(name, Encoding::of_precision(T::PRECISION))?;
        if b.len as usize != expected_len || bytes.len() != expected_len * T::BYTES {
            return Err(Error::format(
                &self.origin,
                format!("blob {name} holds {} values, expected {expected_len}", b.len),
            ));
        }
        Ok(bytes.chunks_exact(T::BYTES).map(T::read_le).collect())
    }

    pub fn u32s(&self, name: &str) -> Result<Vec<u32>> {
        let (b, bytes) = self.blob(name, Encoding::U32)?;
        if bytes.len() != b.len as usize * 4 {
            return Err(Error::format(&self.origin, format!("blob {name} has a bad length")));
        }
        Ok(bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    /// Packed bits and the bit count.
    pub fn bits(&self, name: &str) -> Result<(usize, &[u8])> {
        let (b, bytes) = self.blob(name, Encoding::Bits)?;
        Ok((b.len as usize, bytes))
    }

    pub fn origin(&self) -> &str {
        &self.origin
    }
}

/// Writes through a temporary sibling and renames, so readers never observe
/// a partially written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn sample() -> Vec<u8> {
        let mut w = Writer::new();
        w.values::<f64>("a", &[1.5, -2.0, f64::MIN_POSITIVE]);
        w.u32s("labels", [3u32, 1, 4].into_iter());
        w.bits("flags", 5, &[0b10110]);
        w.finish("test", json!({"x": 1})).unwrap()
    }

    #[test]
    fn round_trip() {
        let r = Reader::from_bytes(&sample(), "mem").unwrap();
        assert_eq!(r.kind(), "test");
        assert_eq!(r.values::<f64>("a", 3).unwrap(), vec![1.5, -2.0, f64::MIN_POSITIVE]);
        assert_eq!(r.u32s("labels").unwrap(), vec![3, 1, 4]);
        assert_eq!(r.bits("flags").unwrap(), (5, &[0b10110u8][..]));
        assert!(r.values::<f32>("a", 3).is_err());
        assert!(r.values::<f64>("a", 2).is_err());
    }

    #[test]
    fn every_flipped_byte_is_rejected() {
        let bytes = sample();
        for i in 0..bytes.len() {
            let mut b = bytes.clone();
            b[i] ^= 0x40;
            assert!(Reader::from_bytes(&b, "mem").is_err(), "byte {i}");
        }
    }

    #[test]
    fn truncation_and_version() {
        let bytes = sample();
        for cut in [0, 7, 20, bytes.len() - 1] {
            assert!(Reader::from_bytes(&bytes[..cut], "mem").is_err());
        }
        let mut b = bytes.clone();
        b[8..12].copy_from_slice(&7u32.to_le_bytes());
        let n = b.len();
        let crc = crc32fast::hash(&b[..n - 4]);
        b[n - 4..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(
            Reader::from_bytes(&b, "mem"),
            Err(Error::Version { found: 7, expected: 1 })
        ));
    }
}
