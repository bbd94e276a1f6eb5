//! Little-endian binary container primitives shared by the checkpoint formats.
//!
//! All multi-byte values are little-endian with no padding between sections.
//! Readers fail with `CorruptContainer` on bad magic, version, or truncation.

use crate::error::{Error, Result};
use std::path::Path;

#[derive(Debug, Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn magic(&mut self, m: &[u8; 4]) {
        self.buf.extend_from_slice(m);
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

    /// Write f64 values truncated to 32-bit storage.
    pub fn f32_slice(&mut self, vs: &[f64]) {
        for &v in vs {
            self.buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }

    pub fn f64_slice(&mut self, vs: &[f64]) {
        for &v in vs {
            self.f64(v);
        }
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }
}

#[derive(Debug)]
pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::CorruptContainer(format!(
                "truncated: need {} bytes at offset {}, have {}",
                n,
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn expect_magic(&mut self, m: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != m {
            return Err(Error::CorruptContainer(format!(
                "bad magic: expected {:?}, got {:?}",
                String::from_utf8_lossy(m),
                String::from_utf8_lossy(got)
            )));
        }
        Ok(())
    }

    pub fn expect_version(&mut self, v: u32) -> Result<()> {
        let got = self.u32()?;
        if got != v {
            return Err(Error::CorruptContainer(format!(
                "unsupported version {got}, expected {v}"
            )));
        }
        Ok(())
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

    /// Read n f32 values widened to f64.
    pub fn f32_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n * 4)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }

    pub fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n * 8)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    /// Fail unless the container was consumed exactly.
    pub fn finish(self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::CorruptContainer(format!(
                "{} trailing bytes",
                self.remaining()
            )));
        }
        Ok(())
    }
}

/// Write via a temp file in the same directory, then rename into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "out".to_string())
    ));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_prims() {
        let mut w = Writer::new();
        w.magic(b"TEST");
        w.u32(7);
        w.u64(1 << 40);
        w.f64(-0.25);
        w.f32_slice(&[1.5, -2.0]);
        let bytes = w.into_bytes();

        let mut r = Reader::new(&bytes);
        r.expect_magic(b"TEST").unwrap();
        assert_eq!(r.u32().unwrap(), 7);
        assert_eq!(r.u64().unwrap(), 1 << 40);
        assert_eq!(r.f64().unwrap(), -0.25);
        assert_eq!(r.f32_vec(2).unwrap(), vec![1.5, -2.0]);
        r.finish().unwrap();
    }

    #[test]
    fn truncation_detected() {
        let mut w = Writer::new();
        w.magic(b"TEST");
        w.u64(3);
        let mut bytes = w.into_bytes();
        bytes.truncate(6);
        let mut r = Reader::new(&bytes);
        r.expect_magic(b"TEST").unwrap();
        assert!(matches!(r.u64(), Err(Error::CorruptContainer(_))));
    }

    #[test]
    fn bad_magic_detected() {
        let mut r = Reader::new(b"NOPE....");
        assert!(matches!(
            r.expect_magic(b"TEST"),
            Err(Error::CorruptContainer(_))
        ));
    }
}
