//! Little-endian binary encoding helpers with trailing SHA-256 checksums.
//!
//! Every artifact file is `magic(8) | version(u32) | payload | checksum(8)`
//! where the checksum is the first 8 bytes of the SHA-256 of everything
//! before it. Readers verify the checksum before parsing, so truncation or
//! corruption surfaces as a checksum error rather than a garbled decode.

use sha2::{Digest, Sha256};
use std::path::Path;

use crate::error::{Error, Result};

pub(crate) const CHECKSUM_LEN: usize = 8;

pub(crate) fn sha8(bytes: &[u8]) -> [u8; CHECKSUM_LEN] {
    let digest = Sha256::digest(bytes);
    let mut out = [0u8; CHECKSUM_LEN];
    out.copy_from_slice(&digest[..CHECKSUM_LEN]);
    out
}

#[derive(Default)]
pub(crate) struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn bytes(&mut self, v: &[u8]) {
        self.buf.extend_from_slice(v);
    }

    pub fn str(&mut self, v: &str) {
        self.u32(v.len() as u32);
        self.bytes(v.as_bytes());
    }

    /// Appends the checksum over everything written so far and returns the
    /// finished file contents.
    pub fn into_checksummed(mut self) -> Vec<u8> {
        let sum = sha8(&self.buf);
        self.buf.extend_from_slice(&sum);
        self.buf
    }
}

/// Verifies the trailing checksum and returns the payload it covers.
pub(crate) fn open_checksummed<'a>(bytes: &'a [u8], what: &str) -> Result<&'a [u8]> {
    if bytes.len() < CHECKSUM_LEN {
        return Err(Error::Malformed {
            what: what.to_string(),
            detail: format!("file is only {} bytes", bytes.len()),
        });
    }
    let (payload, stored) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
    if sha8(payload) != stored {
        return Err(Error::Checksum(format!(
            "{what}: stored checksum does not match contents"
        )));
    }
    Ok(payload)
}

pub(crate) struct ByteReader<'a> {
    data: &'a [u8],
    pos: usize,
    what: String,
}

impl<'a> ByteReader<'a> {
    pub fn new(data: &'a [u8], what: &str) -> Self {
        Self {
            data,
            pos: 0,
            what: what.to_string(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Malformed {
                what: self.what.clone(),
                detail: format!(
                    "needed {n} bytes at offset {} of {}",
                    self.pos,
                    self.data.len()
                ),
            });
        }
        let slice = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        self.take(n)
    }

    pub fn str(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        if len > self.data.len() {
            return Err(Error::Malformed {
                what: self.what.clone(),
                detail: format!("string length {len} exceeds file size"),
            });
        }
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| Error::Malformed {
            what: self.what.clone(),
            detail: "string is not valid UTF-8".to_string(),
        })
    }

    /// Bounded count for a repeated section; caps allocation on bad input.
    pub fn count(&mut self, max: usize, section: &str) -> Result<usize> {
        let n = self.u32()? as usize;
        if n > max {
            return Err(Error::Malformed {
                what: self.what.clone(),
                detail: format!("{section} count {n} exceeds cap {max}"),
            });
        }
        Ok(n)
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(Error::Malformed {
                what: self.what,
                detail: format!(
                    "{} trailing bytes after the last field",
                    self.data.len() - self.pos
                ),
            });
        }
        Ok(())
    }
}

/// Checks an 8-byte magic and a format version, in that order, so unknown
/// files and newer writers get distinct errors.
pub(crate) fn expect_header(
    r: &mut ByteReader,
    magic: &[u8; 8],
    version: u32,
    what: &str,
) -> Result<()> {
    let found = r.bytes(8)?;
    if found != magic {
        return Err(Error::Malformed {
            what: what.to_string(),
            detail: format!("bad magic {:02x?}", found),
        });
    }
    let v = r.u32()?;
    if v != version {
        return Err(Error::VersionMismatch {
            what: what.to_string(),
            found: v,
            expected: version,
        });
    }
    Ok(())
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_all_field_kinds() {
        let mut w = ByteWriter::new();
        w.u8(7);
        w.u32(0xDEAD_BEEF);
        w.u64(u64::MAX - 1);
        w.f64(-0.125);
        w.f32(3.5);
        w.str("hello");
        let bytes = w.into_checksummed();
        let payload = open_checksummed(&bytes, "test").unwrap();
        let mut r = ByteReader::new(payload, "test");
        assert_eq!(r.u8().unwrap(), 7);
        assert_eq!(r.u32().unwrap(), 0xDEAD_BEEF);
        assert_eq!(r.u64().unwrap(), u64::MAX - 1);
        assert_eq!(r.f64().unwrap(), -0.125);
        assert_eq!(r.f32().unwrap(), 3.5);
        assert_eq!(r.str().unwrap(), "hello");
        r.finish().unwrap();
    }

    #[test]
    fn truncation_is_a_checksum_error() {
        let mut w = ByteWriter::new();
        w.u64(42);
        let mut bytes = w.into_checksummed();
        bytes.pop();
        assert!(matches!(
            open_checksummed(&bytes, "t").unwrap_err(),
            Error::Checksum(_)
        ));
    }

    #[test]
    fn corruption_is_a_checksum_error() {
        let mut w = ByteWriter::new();
        w.u64(42);
        let mut bytes = w.into_checksummed();
        bytes[3] ^= 1;
        assert!(matches!(
            open_checksummed(&bytes, "t").unwrap_err(),
            Error::Checksum(_)
        ));
    }

    #[test]
    fn reads_past_end_are_malformed() {
        let mut r = ByteReader::new(&[1, 2], "t");
        assert!(matches!(r.u32().unwrap_err(), Error::Malformed { .. }));
    }

    #[test]
    fn leftover_bytes_are_malformed() {
        let r = ByteReader::new(&[1, 2, 3], "t");
        assert!(matches!(r.finish().unwrap_err(), Error::Malformed { .. }));
    }

    #[test]
    fn header_distinguishes_magic_and_version() {
        let mut w = ByteWriter::new();
        w.bytes(b"MAGICXYZ");
        w.u32(2);
        let bytes = w.into_checksummed();
        let payload = open_checksummed(&bytes, "t").unwrap();

        let mut r = ByteReader::new(payload, "t");
        assert!(matches!(
            expect_header(&mut r, b"OTHERMAG", 2, "t").unwrap_err(),
            Error::Malformed { .. }
        ));

        let mut r = ByteReader::new(payload, "t");
        assert!(matches!(
            expect_header(&mut r, b"MAGICXYZ", 1, "t").unwrap_err(),
            Error::VersionMismatch {
                found: 2,
                expected: 1,
                ..
            }
        ));

        let mut r = ByteReader::new(payload, "t");
        expect_header(&mut r, b"MAGICXYZ", 2, "t").unwrap();
    }
}
