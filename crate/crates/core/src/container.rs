//! Versioned binary container used by forecaster checkpoints and calibration snapshots.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic [8] | version u32 | n_header u32 | header u64 * n_header
//! | meta_len u32 | meta utf-8 | n_blobs u32
//! | per blob: name_len u32 | name | rank u32 | dims u64 * rank | f64 * prod(dims)
//! | sha256 of everything above [32]
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub magic: [u8; 8],
    pub version: u32,
    pub header: Vec<u64>,
    pub metadata: String,
    pub blobs: Vec<(String, Tensor)>,
}

impl Container {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.magic);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(self.header.len() as u32).to_le_bytes());
        for h in &self.header {
            out.extend_from_slice(&h.to_le_bytes());
        }
        put_str(&mut out, &self.metadata);
        out.extend_from_slice(&(self.blobs.len() as u32).to_le_bytes());
        for (name, t) in &self.blobs {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    /// Parses and verifies `bytes`; `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path, magic: &[u8; 8], version: u32) -> Result<Self> {
        let err = |message: String| Error::Checkpoint {
            path: path.to_path_buf(),
            message,
        };
        if bytes.len() < magic.len() + 4 + DIGEST_LEN {
            return Err(err(format!("truncated file ({} bytes)", bytes.len())));
        }
        if &bytes[..8] != magic {
            return Err(err(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&bytes[..8]),
                String::from_utf8_lossy(magic)
            )));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        let mut r = Reader { buf: body, pos: 8 };
        let found = r.u32().ok_or_else(|| err("truncated file".into()))?;
        if found != version {
            return Err(err(format!("format version {found}, this build reads {version}")));
        }
        if Sha256::digest(body).as_slice() != digest {
            return Err(err("checksum mismatch; file is corrupt or truncated".into()));
        }
        let parsed = (|| {
            let n = r.u32()? as usize;
            let header = (0..n).map(|_| r.u64()).collect::<Option<Vec<_>>>()?;
            let metadata = r.string()?;
            let nb = r.u32()? as usize;
            let mut blobs = Vec::with_capacity(nb);
            for _ in 0..nb {
                let name = r.string()?;
                let rank = r.u32()? as usize;
                let shape = (0..rank)
                    .map(|_| r.u64().map(|d| d as usize))
                    .collect::<Option<Vec<_>>>()?;
                let len = shape.iter().product::<usize>();
                let data = (0..len).map(|_| r.f64()).collect::<Option<Vec<_>>>()?;
                blobs.push((name, Tensor::new(&shape, data).ok()?));
            }
            (r.pos == body.len()).then_some((header, metadata, blobs))
        })();
        let (header, metadata, blobs) = parsed.ok_or_else(|| err("malformed body".into()))?;
        Ok(Container {
            magic: *magic,
            version,
            header,
            metadata,
            blobs,
        })
    }

    /// Writes through a temporary sibling file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path, magic: &[u8; 8], version: u32) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Self::from_bytes(&bytes, path, magic, version)
    }

    pub fn blob(&self, name: &str) -> Option<&Tensor> {
        self.blobs.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

/// Writes `bytes` to `path` via a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = PathBuf::from(path);
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    tmp.set_file_name(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Option<[u8; N]> {
        let s = self.buf.get(self.pos..self.pos + N)?;
        self.pos += N;
        s.try_into().ok()
    }

    fn u32(&mut self) -> Option<u32> {
        self.take().map(u32::from_le_bytes)
    }

    fn u64(&mut self) -> Option<u64> {
        self.take().map(u64::from_le_bytes)
    }

    fn f64(&mut self) -> Option<f64> {
        self.take().map(f64::from_le_bytes)
    }

    fn string(&mut self) -> Option<String> {
        let n = self.u32()? as usize;
        let s = self.buf.get(self.pos..self.pos + n)?;
        self.pos += n;
        String::from_utf8(s.to_vec()).ok()
    }
}
