//! Little-endian binary helpers shared by the checkpoint, bank, calibration and
//! feature-archive formats.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub(crate) struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new(magic: &[u8; 4], version: u8) -> Self {
        let mut buf = Vec::with_capacity(1024);
        buf.extend_from_slice(magic);
        buf.push(version);
        Self { buf }
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn count(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::Config(format!("count {v} exceeds u32")))?;
        self.u32(v);
        Ok(())
    }

    pub fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

/// Cursor over a byte buffer that reports the offset of the first violation.
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
    format: &'static str,
}

impl<'a> ByteReader<'a> {
    /// Checks the 4-byte magic and the version byte.
    pub fn open(buf: &'a [u8], format: &'static str, magic: &[u8; 4], version: u8) -> Result<Self> {
        let mut r = Self {
            buf,
            pos: 0,
            format,
        };
        let m = r.take(4)?;
        if m != magic {
            return Err(r.error_at(0, format!("bad magic {m:?}, expected {magic:?}")));
        }
        let v = r.u8()?;
        if v != version {
            return Err(r.error_at(4, format!("unsupported version {v}, expected {version}")));
        }
        Ok(r)
    }

    pub fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub fn error_at(&self, offset: usize, reason: impl Into<String>) -> Error {
        Error::Format {
            format: self.format,
            offset: offset as u64,
            reason: reason.into(),
        }
    }

    pub fn error(&self, reason: impl Into<String>) -> Error {
        self.error_at(self.pos, reason)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.error(format!(
                "truncated: need {n} bytes, {} remain",
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn count(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    pub fn f32(&mut self) -> Result<f32> {
        let b = self.take(4)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(f64::from_le_bytes(a))
    }

    /// Reads `n` finite f64 values.
    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        if (self.buf.len() - self.pos) / 8 < n {
            return Err(self.error(format!("truncated: need {n} f64 values")));
        }
        (0..n)
            .map(|_| {
                let at = self.pos;
                let v = self.f64()?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(self.error_at(at, "non-finite value"))
                }
            })
            .collect()
    }

    pub fn expect_end(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.error(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Artifact(format!("{}: {e}", path.display())))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}
