//! Little-endian binary container shared by the dataset and checkpoint files.
//!
//! Every file ends with the XXH64 (seed 0) of all bytes before it.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use xxhash_rust::xxh64::Xxh64;

use crate::error::{Result, SmoeError};

/// Writer that hashes everything it emits.
pub struct HashingWriter<W: Write> {
    inner: W,
    hasher: Xxh64,
    path: PathBuf,
}

impl<W: Write> HashingWriter<W> {
    pub fn new(inner: W, path: &Path) -> Self {
        HashingWriter {
            inner,
            hasher: Xxh64::new(0),
            path: path.to_path_buf(),
        }
    }

    pub fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.hasher.update(b);
        self.inner
            .write_all(b)
            .map_err(|e| SmoeError::io(&self.path, e))
    }

    pub fn u16(&mut self, v: u16) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn u32(&mut self, v: u32) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn u64(&mut self, v: u64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn f32s(&mut self, values: &[f32]) -> Result<()> {
        let mut buf = Vec::with_capacity(values.len() * 4);
        for v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        self.bytes(&buf)
    }

    /// Appends the checksum and flushes.
    pub fn finish(mut self) -> Result<W> {
        let digest = self.hasher.digest();
        self.inner
            .write_all(&digest.to_le_bytes())
            .and_then(|_| self.inner.flush())
            .map_err(|e| SmoeError::io(&self.path, e))?;
        Ok(self.inner)
    }
}

/// Reader that hashes what it consumes and knows its byte offset, so every
/// parse error can say where it happened.
pub struct HashingReader<R: Read> {
    inner: R,
    hasher: Xxh64,
    offset: u64,
    path: PathBuf,
}

impl<R: Read> HashingReader<R> {
    pub fn new(inner: R, path: &Path) -> Self {
        HashingReader {
            inner,
            hasher: Xxh64::new(0),
            offset: 0,
            path: path.to_path_buf(),
        }
    }

    pub fn offset(&self) -> u64 {
        self.offset
    }

    pub fn error(&self, offset: u64, detail: impl Into<String>) -> SmoeError {
        SmoeError::Format {
            path: self.path.clone(),
            offset,
            detail: detail.into(),
        }
    }

    fn fill(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let start = self.offset;
        let mut got = 0;
        while got < buf.len() {
            match self.inner.read(&mut buf[got..]) {
                Ok(0) => {
                    return Err(self.error(
                        start + got as u64,
                        format!("truncated while reading {what}"),
                    ))
                }
                Ok(n) => got += n,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(SmoeError::io(&self.path, e)),
            }
        }
        self.offset += buf.len() as u64;
        Ok(())
    }

    pub fn bytes(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        self.fill(buf, what)?;
        self.hasher.update(buf);
        Ok(())
    }

    pub fn u16(&mut self, what: &str) -> Result<u16> {
        let mut b = [0u8; 2];
        self.bytes(&mut b, what)?;
        Ok(u16::from_le_bytes(b))
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.bytes(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        let mut b = [0u8; 8];
        self.bytes(&mut b, what)?;
        Ok(u64::from_le_bytes(b))
    }

    pub fn f32s_into(&mut self, out: &mut Vec<f32>, count: usize, what: &str) -> Result<()> {
        const CHUNK: usize = 1 << 16;
        let mut buf = vec![0u8; CHUNK * 4];
        let mut left = count;
        while left > 0 {
            let n = left.min(CHUNK);
            self.bytes(&mut buf[..n * 4], what)?;
            out.extend(
                buf[..n * 4]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])),
            );
            left -= n;
        }
        Ok(())
    }

    pub fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let mut m = [0u8; 4];
        self.bytes(&mut m, "magic")?;
        if &m != expected {
            return Err(self.error(
                0,
                format!(
                    "expected magic {:?}, found {:?}",
                    String::from_utf8_lossy(expected),
                    String::from_utf8_lossy(&m)
                ),
            ));
        }
        Ok(())
    }

    pub fn version(&mut self, supported: u32) -> Result<()> {
        let at = self.offset;
        let v = self.u32("version")?;
        if v != supported {
            return Err(self.error(at, format!("unsupported version {v}, expected {supported}")));
        }
        Ok(())
    }

    /// Reads the trailing checksum, compares it and insists on end of file.
    pub fn finish(mut self) -> Result<()> {
        let expected = self.hasher.digest();
        let at = self.offset;
        let mut b = [0u8; 8];
        self.fill(&mut b, "checksum")?;
        let stored = u64::from_le_bytes(b);
        if stored != expected {
            return Err(self.error(
                at,
                format!("checksum mismatch: stored {stored:#018x}, computed {expected:#018x}"),
            ));
        }
        let mut extra = [0u8; 1];
        match self.inner.read(&mut extra) {
            Ok(0) => Ok(()),
            Ok(_) => Err(self.error(self.offset, "trailing bytes after checksum")),
            Err(e) => Err(SmoeError::io(&self.path, e)),
        }
    }
}
