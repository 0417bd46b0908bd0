//! Versioned binary container for model persistence.
//!
//! Layout: magic bytes `CNPY`, a u32 format version, a u32 section count, then
//! length-prefixed named sections. All integers little-endian. Section payloads
//! are opaque to the container; each model kind defines its own encoding on
//! top of the primitive readers/writers here.

use std::path::Path;

use crate::error::CanopyError;
use crate::Result;

pub const MAGIC: [u8; 4] = *b"CNPY";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Section {
    pub name: String,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, Default)]
pub struct Container {
    pub sections: Vec<Section>,
}

impl Container {
    pub fn new() -> Self {
        Container::default()
    }

    pub fn push(&mut self, name: &str, payload: Vec<u8>) {
        self.sections.push(Section {
            name: name.to_string(),
            payload,
        });
    }

    pub fn get(&self, name: &str) -> Option<&[u8]> {
        self.sections
            .iter()
            .find(|s| s.name == name)
            .map(|s| s.payload.as_slice())
    }

    pub fn require(&self, name: &str) -> Result<&[u8]> {
        self.get(name)
            .ok_or_else(|| CanopyError::InvalidContainer(format!("missing section `{name}`")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for section in &self.sections {
            let name = section.name.as_bytes();
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name);
            out.extend_from_slice(&(section.payload.len() as u64).to_le_bytes());
            out.extend_from_slice(&section.payload);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(CanopyError::InvalidContainer("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(CanopyError::InvalidContainer(format!(
                "unsupported format version {version}"
            )));
        }
        let n = r.u32()? as usize;
        let mut sections = Vec::with_capacity(n);
        for _ in 0..n {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|e| CanopyError::InvalidContainer(e.to_string()))?;
            let payload_len = r.u64()? as usize;
            let payload = r.take(payload_len)?.to_vec();
            sections.push(Section { name, payload });
        }
        Ok(Container { sections })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| CanopyError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CanopyError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Cursor over a byte slice with bounds-checked primitive reads.
pub struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(CanopyError::InvalidContainer(format!(
                "truncated: wanted {n} bytes at offset {}",
                self.pos
            )));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
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

    pub fn f64_vec(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(self.f64()?);
        }
        Ok(out)
    }

    pub fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|e| CanopyError::InvalidContainer(e.to_string()))
    }

    pub fn is_at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Payload builder mirroring [`Reader`].
#[derive(Default)]
pub struct Writer {
    bytes: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Writer::default()
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.bytes.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.bytes.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.bytes.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn f64_slice(&mut self, vs: &[f64]) -> &mut Self {
        self.u64(vs.len() as u64);
        for &v in vs {
            self.f64(v);
        }
        self
    }

    pub fn string(&mut self, s: &str) -> &mut Self {
        self.u32(s.len() as u32);
        self.bytes.extend_from_slice(s.as_bytes());
        self
    }

    pub fn finish(self) -> Vec<u8> {
        self.bytes
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip() {
        let mut w = Writer::new();
        w.u32(7).f64(1.5).f64_slice(&[0.25, -3.0]).string("hello");
        let mut c = Container::new();
        c.push("demo", w.finish());
        c.push("empty", vec![]);
        let bytes = c.to_bytes();
        assert_eq!(&bytes[..4], b"CNPY");

        let back = Container::from_bytes(&bytes).unwrap();
        let mut r = Reader::new(back.require("demo").unwrap());
        assert_eq!(r.u32().unwrap(), 7);
        assert_eq!(r.f64().unwrap(), 1.5);
        assert_eq!(r.f64_vec().unwrap(), vec![0.25, -3.0]);
        assert_eq!(r.string().unwrap(), "hello");
        assert!(r.is_at_end());
        assert!(back.get("empty").is_some());
        assert!(back.get("absent").is_none());
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(Container::from_bytes(b"NOPE").is_err());
        let c = {
            let mut c = Container::new();
            c.push("a", vec![1, 2, 3]);
            c
        };
        let bytes = c.to_bytes();
        assert!(Container::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
