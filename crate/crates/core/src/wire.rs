//! Little-endian framing helpers shared by the dataset and checkpoint
//! formats. Every file built with [`Writer::finish`] ends in a SHA-256 digest
//! of the preceding bytes, which [`Reader::open`] verifies before any field
//! is parsed.

use crate::error::{Error, Result};
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8; 4], version: u32) -> Self {
        let mut w = Writer { buf: Vec::new() };
        w.buf.extend_from_slice(magic);
        w.u32(version);
        w
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

    pub fn bytes(&mut self, v: &[u8]) {
        self.buf.extend_from_slice(v);
    }

    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    /// Appends the SHA-256 of everything written so far and returns the
    /// finished file image.
    pub fn finish(mut self) -> Vec<u8> {
        let digest = Sha256::digest(&self.buf);
        self.buf.extend_from_slice(&digest);
        self.buf
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Verifies the digest footer and magic/version header, then positions
    /// the cursor after the header.
    pub fn open(data: &'a [u8], magic: &[u8; 4], version: u32, what: &str) -> Result<Self> {
        if data.len() < 32 + 8 {
            return Err(Error::io(format!("{what}: file too short ({} bytes)", data.len())));
        }
        let (body, footer) = data.split_at(data.len() - 32);
        let digest = Sha256::digest(body);
        if digest.as_slice() != footer {
            return Err(Error::io(format!("{what}: content digest mismatch (corrupt or truncated file)")));
        }
        let mut r = Reader { buf: body, pos: 0 };
        let got_magic = r.take(4, what)?;
        if got_magic != magic {
            return Err(Error::io(format!("{what}: bad magic {got_magic:02x?}")));
        }
        let got_version = r.u32(what)?;
        if got_version != version {
            return Err(Error::io(format!(
                "{what}: unsupported format version {got_version} (expected {version})"
            )));
        }
        Ok(r)
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::io(format!("{what}: truncated at byte {}", self.pos)));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub fn str(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as usize;
        let bytes = self.take(len, what)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::io(format!("{what}: invalid utf-8 string")))
    }

    pub fn done(&self, what: &str) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::io(format!(
                "{what}: {} trailing bytes after last field",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}
