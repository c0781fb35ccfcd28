//! Versioned checkpoint container.
//!
//! Layout: the magic `BAMMCKPT`, a little-endian `u64` header length, the
//! header JSON `{format_version, kind, config, tensors}` and then the tensor
//! data as little-endian `f32` blobs at the byte offsets listed in the index
//! (offsets are relative to the start of the blob section).

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"BAMMCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: String,
    config: serde_json::Value,
    tensors: BTreeMap<String, TensorEntry>,
}

/// Named `f32` tensors plus a JSON config, tagged with the model kind.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: serde_json::Value,
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

impl Checkpoint {
    pub fn new(kind: &str, config: serde_json::Value) -> Self {
        Self { kind: kind.to_string(), config, tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, data: Vec<f32>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.insert(name.to_string(), (shape, data));
    }

    pub fn tensor(&self, name: &str) -> Result<&(Vec<usize>, Vec<f32>)> {
        self.tensors.get(name).ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` missing")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut index = BTreeMap::new();
        let mut offset = 0u64;
        for (name, (shape, data)) in &self.tensors {
            index.insert(name.clone(), TensorEntry { dtype: "f32".into(), shape: shape.clone(), offset });
            offset += 4 * data.len() as u64;
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            config: self.config.clone(),
            tensors: index,
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, data) in self.tensors.values() {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {}", header.format_version)));
        }
        let blobs = &bytes[16 + hlen..];
        let mut tensors = BTreeMap::new();
        for (name, e) in header.tensors {
            if e.dtype != "f32" {
                return Err(Error::Checkpoint(format!("tensor `{name}` has unsupported dtype {}", e.dtype)));
            }
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let raw = blobs
                .get(start..start + 4 * n)
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` extends past end of file")))?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            tensors.insert(name, (e.shape, data));
        }
        Ok(Self { kind: header.kind, config: header.config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingArtifact(path.display().to_string())
            } else {
                Error::io(path, e)
            }
        })?;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!("expected a {kind} checkpoint, found {}", self.kind)));
        }
        Ok(())
    }
}
