//! Shared binary conventions for persisted weights.
//!
//! Little-endian throughout: a 4-byte magic, a `u16` format version, the
//! type-specific header and payload, then a trailing SHA-256 over every
//! preceding byte. Strings are a `u16` byte length followed by UTF-8 and
//! reals are raw IEEE-754 `f64`.

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u16 = 1;
const DIGEST_LEN: usize = 32;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub struct ArtifactWriter {
    buf: Vec<u8>,
}

impl ArtifactWriter {
    pub fn new(magic: &[u8; 4]) -> Self {
        let mut buf = Vec::with_capacity(1024);
        buf.extend_from_slice(magic);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        Self { buf }
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u16(&mut self, v: u16) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn str(&mut self, s: &str) -> Result<&mut Self> {
        let len = u16::try_from(s.len())
            .map_err(|_| Error::Format(format!("string of {} bytes is too long", s.len())))?;
        self.u16(len);
        self.buf.extend_from_slice(s.as_bytes());
        Ok(self)
    }

    pub fn reals(&mut self, values: &[f64]) -> &mut Self {
        self.buf.reserve(values.len() * 8);
        for v in values {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
        self
    }

    /// Appends the digest and returns the complete file image.
    pub fn finish(mut self) -> Vec<u8> {
        let digest = Sha256::digest(&self.buf);
        self.buf.extend_from_slice(&digest);
        self.buf
    }
}

pub struct ArtifactReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ArtifactReader<'a> {
    /// Checks magic, version and the trailing digest.
    pub fn open(bytes: &'a [u8], magic: &[u8; 4]) -> Result<Self> {
        if bytes.len() < 6 + DIGEST_LEN {
            return Err(Error::Format(format!(
                "file of {} bytes is truncated",
                bytes.len()
            )));
        }
        if &bytes[..4] != magic {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&bytes[..4]),
                String::from_utf8_lossy(magic)
            )));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported format version {version}"
            )));
        }
        let body_len = bytes.len() - DIGEST_LEN;
        let digest = Sha256::digest(&bytes[..body_len]);
        if digest.as_slice() != &bytes[body_len..] {
            return Err(Error::Integrity(
                "content digest does not match file bytes".into(),
            ));
        }
        Ok(Self {
            bytes: &bytes[..body_len],
            pos: 6,
        })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("unexpected end of payload".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn str(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        let b = self.take(len)?;
        String::from_utf8(b.to_vec()).map_err(|e| Error::Format(format!("invalid UTF-8: {e}")))
    }

    pub fn reals(&mut self, n: usize) -> Result<Vec<f64>> {
        let b = self.take(n * 8)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub fn expect_end(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing payload bytes",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

/// Writes `bytes` to `path` via a temporary file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<u8> {
        let mut w = ArtifactWriter::new(b"TEST");
        w.u8(7).u16(300).u32(70_000);
        w.str("tenant").unwrap();
        w.reals(&[1.5, -0.25]);
        w.finish()
    }

    #[test]
    fn reads_back_fields() {
        let bytes = sample();
        let mut r = ArtifactReader::open(&bytes, b"TEST").unwrap();
        assert_eq!(r.u8().unwrap(), 7);
        assert_eq!(r.u16().unwrap(), 300);
        assert_eq!(r.u32().unwrap(), 70_000);
        assert_eq!(r.str().unwrap(), "tenant");
        assert_eq!(r.reals(2).unwrap(), vec![1.5, -0.25]);
        r.expect_end().unwrap();
    }

    #[test]
    fn corruption_is_classified() {
        let bytes = sample();
        let mut magic = bytes.clone();
        magic[0] ^= 0xff;
        assert!(matches!(
            ArtifactReader::open(&magic, b"TEST"),
            Err(Error::Format(_))
        ));

        let mut version = bytes.clone();
        version[4] = 9;
        assert!(matches!(
            ArtifactReader::open(&version, b"TEST"),
            Err(Error::Format(_))
        ));

        let mut payload = bytes.clone();
        payload[12] ^= 1;
        assert!(matches!(
            ArtifactReader::open(&payload, b"TEST"),
            Err(Error::Integrity(_))
        ));

        assert!(matches!(
            ArtifactReader::open(&bytes[..10], b"TEST"),
            Err(Error::Format(_))
        ));
    }
}
