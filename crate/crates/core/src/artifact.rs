//! Little-endian binary framing shared by every persisted artifact.
//!
//! Each file starts with an 8-byte magic, a `u32` format version and a `u64`
//! config fingerprint, followed by a type-specific payload. The fingerprint
//! lets the pipeline decide whether an artifact on disk is still current.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

/// Stable 64-bit fingerprint of any serializable value.
///
/// Hashes the canonical JSON encoding, so struct field order matters and maps
/// must be ordered (`BTreeMap`, not `HashMap`).
pub fn fingerprint<T: Serialize + ?Sized>(value: &T) -> u64 {
    let json = serde_json::to_vec(value).expect("fingerprinted values serialize");
    let digest = Sha256::digest(&json);
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Fingerprint of raw file contents.
pub fn fingerprint_bytes(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Combines an upstream fingerprint with stage-local parameters.
pub fn chain<T: Serialize + ?Sized>(upstream: u64, value: &T) -> u64 {
    fingerprint(&(upstream, value))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub magic: [u8; 8],
    pub version: u32,
    pub fingerprint: u64,
}

pub struct ArtifactWriter<W: Write> {
    inner: W,
}

impl ArtifactWriter<BufWriter<File>> {
    pub fn create(path: &Path, magic: &[u8; 8], fingerprint: u64) -> Result<Self> {
        let file = File::create(path)?;
        ArtifactWriter::new(BufWriter::new(file), magic, fingerprint)
    }
}

impl<W: Write> ArtifactWriter<W> {
    pub fn new(inner: W, magic: &[u8; 8], fingerprint: u64) -> Result<Self> {
        let mut w = ArtifactWriter { inner };
        w.inner.write_all(magic)?;
        w.u32(FORMAT_VERSION)?;
        w.u64(fingerprint)?;
        Ok(w)
    }

    pub fn u16(&mut self, v: u16) -> Result<()> {
        Ok(self.inner.write_all(&v.to_le_bytes())?)
    }

    pub fn u32(&mut self, v: u32) -> Result<()> {
        Ok(self.inner.write_all(&v.to_le_bytes())?)
    }

    pub fn u64(&mut self, v: u64) -> Result<()> {
        Ok(self.inner.write_all(&v.to_le_bytes())?)
    }

    pub fn f32(&mut self, v: f32) -> Result<()> {
        Ok(self.inner.write_all(&v.to_le_bytes())?)
    }

    pub fn f64(&mut self, v: f64) -> Result<()> {
        Ok(self.inner.write_all(&v.to_le_bytes())?)
    }

    pub fn f64s(&mut self, vs: &[f64]) -> Result<()> {
        self.u64(vs.len() as u64)?;
        for &v in vs {
            self.f64(v)?;
        }
        Ok(())
    }

    pub fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.u64(b.len() as u64)?;
        Ok(self.inner.write_all(b)?)
    }

    pub fn finish(mut self) -> Result<W> {
        self.inner.flush()?;
        Ok(self.inner)
    }
}

pub struct ArtifactReader<R: Read> {
    inner: R,
    pub header: Header,
}

impl ArtifactReader<BufReader<File>> {
    pub fn open(path: &Path, magic: &[u8; 8]) -> Result<Self> {
        let file = File::open(path)?;
        ArtifactReader::new(BufReader::new(file), magic).map_err(|e| Error::Artifact {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

impl<R: Read> ArtifactReader<R> {
    pub fn new(mut inner: R, magic: &[u8; 8]) -> Result<Self> {
        let mut found = [0u8; 8];
        inner.read_exact(&mut found).map_err(truncated)?;
        if &found != magic {
            return Err(Error::Format(format!(
                "expected magic {:?}, found {:?}",
                String::from_utf8_lossy(magic),
                String::from_utf8_lossy(&found)
            )));
        }
        let mut r = ArtifactReader {
            inner,
            header: Header {
                magic: found,
                version: 0,
                fingerprint: 0,
            },
        };
        r.header.version = r.u32()?;
        if r.header.version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported version {}",
                r.header.version
            )));
        }
        r.header.fingerprint = r.u64()?;
        Ok(r)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(truncated)?;
        Ok(buf)
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    pub fn len(&mut self, limit: u64) -> Result<usize> {
        let n = self.u64()?;
        if n > limit {
            return Err(Error::Format(format!("length {n} exceeds limit {limit}")));
        }
        Ok(n as usize)
    }

    pub fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len(1 << 32)?;
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn bytes(&mut self) -> Result<Vec<u8>> {
        let n = self.len(1 << 32)?;
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(truncated)?;
        Ok(buf)
    }

    /// Fails unless the whole input has been consumed.
    pub fn expect_eof(mut self) -> Result<()> {
        let mut probe = [0u8; 1];
        match self.inner.read(&mut probe)? {
            0 => Ok(()),
            _ => Err(Error::Format("trailing bytes".into())),
        }
    }
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("truncated".into())
    } else {
        Error::Io(e)
    }
}

/// Reads only the header of an artifact, returning `None` when the file is
/// missing or its framing is unreadable.
pub fn peek_fingerprint(path: &Path, magic: &[u8; 8]) -> Option<u64> {
    ArtifactReader::open(path, magic)
        .ok()
        .map(|r| r.header.fingerprint)
}
