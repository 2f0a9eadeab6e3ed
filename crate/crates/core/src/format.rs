//! Binary container plumbing shared by the dataset, trajectory, and
//! synthetic-artifact formats.
//!
//! Every file is: an 8-byte ASCII magic, little-endian fixed-width fields
//! and length-prefixed JSON blocks, then a trailing 64-bit FNV-1a digest of
//! every preceding byte. Readers verify the digest before parsing.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

pub struct BlockWriter {
    buf: Vec<u8>,
}

impl BlockWriter {
    pub fn new(magic: &[u8; 8]) -> Self {
        BlockWriter { buf: magic.to_vec() }
    }

    pub fn put_u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn put_u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn put_u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn put_f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn put_f64_slice(&mut self, vs: &[f64]) {
        for v in vs {
            self.put_f64(*v);
        }
    }

    pub fn put_json_block<T: Serialize>(&mut self, value: &T) -> Result<()> {
        let json = serde_json::to_vec(value)
            .map_err(|e| Error::format("<memory>", format!("json encode: {e}")))?;
        self.put_u32(json.len() as u32);
        self.buf.extend_from_slice(&json);
        Ok(())
    }

    /// Append the digest and return the finished byte stream.
    pub fn finish(mut self) -> Vec<u8> {
        let digest = fnv1a(&self.buf);
        self.buf.extend_from_slice(&digest.to_le_bytes());
        self.buf
    }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(path.display().to_string(), e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

#[derive(Debug)]
pub struct BlockReader {
    buf: Vec<u8>,
    pos: usize,
    path: String,
}

impl BlockReader {
    /// Load a file, verify the trailing digest, and check the magic.
    pub fn open(path: &Path, magic: &[u8; 8]) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_bytes(buf, magic, path.display().to_string())
    }

    pub fn from_bytes(buf: Vec<u8>, magic: &[u8; 8], path: String) -> Result<Self> {
        if buf.len() < 16 {
            return Err(Error::format(path, "file truncated (shorter than header)"));
        }
        let body_len = buf.len() - 8;
        let stored = u64::from_le_bytes(buf[body_len..].try_into().expect("8 bytes"));
        let computed = fnv1a(&buf[..body_len]);
        if stored != computed {
            return Err(Error::format(
                path,
                format!("digest mismatch: stored {stored:016x}, computed {computed:016x}"),
            ));
        }
        if &buf[..8] != magic {
            return Err(Error::format(
                path,
                format!(
                    "bad magic: expected {:?}, found {:?}",
                    String::from_utf8_lossy(magic),
                    String::from_utf8_lossy(&buf[..8])
                ),
            ));
        }
        Ok(BlockReader { buf, pos: 8, path })
    }

    fn body_len(&self) -> usize {
        self.buf.len() - 8
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.body_len() {
            return Err(Error::format(self.path.clone(), "file truncated (payload)"));
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    pub fn take_u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn take_u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn take_u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn take_f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn take_f64_vec(&mut self, len: usize) -> Result<Vec<f64>> {
        let bytes = self.take(len * 8)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub fn take_json_block<T: DeserializeOwned>(&mut self) -> Result<T> {
        let len = self.take_u32()? as usize;
        let path = self.path.clone();
        let bytes = self.take(len)?;
        serde_json::from_slice(bytes).map_err(|e| Error::format(path, format!("json decode: {e}")))
    }

    /// Assert the payload was fully consumed.
    pub fn finish(self) -> Result<()> {
        let body = self.body_len();
        if self.pos != body {
            return Err(Error::format(
                self.path,
                format!("trailing bytes: consumed {}, payload {body}", self.pos),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_digest() {
        let mut w = BlockWriter::new(b"TEST0001");
        w.put_u32(7);
        w.put_f64_slice(&[1.5, -2.25]);
        w.put_json_block(&serde_json::json!({"k": 3})).unwrap();
        let bytes = w.finish();

        let mut r = BlockReader::from_bytes(bytes.clone(), b"TEST0001", "<mem>".into()).unwrap();
        assert_eq!(r.take_u32().unwrap(), 7);
        assert_eq!(r.take_f64_vec(2).unwrap(), vec![1.5, -2.25]);
        let v: serde_json::Value = r.take_json_block().unwrap();
        assert_eq!(v["k"], 3);
        r.finish().unwrap();

        // Flip one payload byte: digest must catch it.
        let mut corrupt = bytes.clone();
        corrupt[9] ^= 0x40;
        assert!(BlockReader::from_bytes(corrupt, b"TEST0001", "<mem>".into()).is_err());

        // Wrong magic is a format error even with a valid digest.
        let mut w2 = BlockWriter::new(b"XXXX0001");
        w2.put_u32(1);
        let other = w2.finish();
        let err = BlockReader::from_bytes(other, b"TEST0001", "<mem>".into()).unwrap_err();
        assert!(err.to_string().contains("magic"));
    }

    #[test]
    fn fnv_reference_values() {
        // Standard FNV-1a test vectors.
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a(b"foobar"), 0x85944171f73967e8);
    }
}
