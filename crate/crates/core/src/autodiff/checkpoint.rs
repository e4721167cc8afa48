//! Binary checkpoint container.
//!
//! ```text
//! magic    8 bytes  "FFOLDCKP"
//! version  u32 LE
//! hlen     u64 LE   length of the header text
//! header   hlen bytes of UTF-8 JSON: {"meta": …, "tensors": [{"name", "shape"}, …]}
//! payload  every tensor in header order, row-major, f64 LE
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::{AutodiffError, Matrix};

pub const MAGIC: &[u8; 8] = b"FFOLDCKP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Ordered named tensors plus free-form metadata (architecture, config, …).
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Matrix)>,
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Matrix) {
        self.tensors.push((name.into(), value));
    }

    /// Appends every parameter of `store` as `{prefix}{name}`.
    pub fn push_store(&mut self, prefix: &str, store: &ParamStore) {
        for p in store.iter() {
            self.push(format!("{prefix}{}", p.name), p.value.clone());
        }
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn require(&self, name: &str) -> Result<&Matrix, AutodiffError> {
        self.get(name)
            .ok_or_else(|| AutodiffError::MissingParam(name.to_string()))
    }

    /// Overwrites every parameter of `store` from `{prefix}{name}` tensors.
    pub fn load_store(&self, prefix: &str, store: &mut ParamStore) -> Result<(), AutodiffError> {
        for p in store.iter_mut() {
            let src = self.require(&format!("{prefix}{}", p.name))?;
            if src.dim() != p.value.dim() {
                return Err(AutodiffError::Checkpoint(format!(
                    "shape mismatch for {}: stored {:?}, expected {:?}",
                    p.name,
                    src.dim(),
                    p.value.dim()
                )));
            }
            p.value.assign(src);
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, m)| TensorEntry {
                    name: name.clone(),
                    shape: [m.nrows(), m.ncols()],
                })
                .collect(),
        };
        let text = serde_json::to_vec(&header).expect("header serializes");
        let payload: usize = self.tensors.iter().map(|(_, m)| m.len() * 8).sum();
        let mut out = Vec::with_capacity(20 + text.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(&text);
        for (_, m) in &self.tensors {
            for v in m.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, AutodiffError> {
        let bad = |msg: &str| AutodiffError::Checkpoint(msg.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(AutodiffError::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])
            .map_err(|e| AutodiffError::Checkpoint(format!("malformed header: {e}")))?;
        let mut data = &body[hlen..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let [r, c] = entry.shape;
            let n = r * c;
            if data.len() < n * 8 {
                return Err(bad("truncated payload"));
            }
            let values: Vec<f64> = data[..n * 8]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            data = &data[n * 8..];
            let m = Matrix::from_shape_vec((r, c), values).expect("length matches shape");
            tensors.push((entry.name, m));
        }
        if !data.is_empty() {
            return Err(bad("trailing bytes after payload"));
        }
        Ok(Self {
            meta: header.meta,
            tensors,
        })
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(&self.to_bytes())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, AutodiffError> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)
            .map_err(|e| AutodiffError::Checkpoint(e.to_string()))?;
        Self::from_bytes(&buf)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self, AutodiffError> {
        let bytes = std::fs::read(path)
            .map_err(|e| AutodiffError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}
