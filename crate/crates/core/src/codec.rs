//! Little-endian helpers shared by the checkpoint and dataset formats.

use crate::error::FormatError;

pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8; 4], version: u32) -> Self {
        let mut w = Self { buf: Vec::new() };
        w.buf.extend_from_slice(magic);
        w.u32(version);
        w
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Checks magic and version, leaving the cursor after the header.
    pub fn open(buf: &'a [u8], magic: &[u8; 4], version: u32) -> Result<Self, FormatError> {
        let mut r = Self { buf, pos: 0 };
        let found = r.take(4, "magic")?;
        if found != magic {
            let mut f = [0u8; 4];
            f.copy_from_slice(found);
            return Err(FormatError::BadMagic {
                expected: *magic,
                found: f,
            });
        }
        let v = r.u32("version")?;
        if v != version {
            return Err(FormatError::VersionMismatch {
                expected: version,
                found: v,
            });
        }
        Ok(r)
    }

    fn take(&mut self, n: usize, context: &str) -> Result<&'a [u8], FormatError> {
        if self.buf.len() - self.pos < n {
            return Err(FormatError::Truncated {
                context: context.to_string(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self, context: &str) -> Result<u32, FormatError> {
        let b = self.take(4, context)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub fn u16(&mut self, context: &str) -> Result<u16, FormatError> {
        let b = self.take(2, context)?;
        Ok(u16::from_le_bytes(b.try_into().expect("2 bytes")))
    }

    pub fn f32_vec(&mut self, n: usize, context: &str) -> Result<Vec<f64>, FormatError> {
        let b = self.take(n.checked_mul(4).ok_or_else(|| FormatError::Malformed(context.into()))?, context)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect())
    }

    pub fn str(&mut self, context: &str) -> Result<String, FormatError> {
        let n = self.u32(context)? as usize;
        let b = self.take(n, context)?;
        String::from_utf8(b.to_vec()).map_err(|_| FormatError::Malformed(format!("{context}: invalid utf-8")))
    }

    pub fn finish(&self) -> Result<(), FormatError> {
        if self.pos != self.buf.len() {
            return Err(FormatError::Malformed(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}
