//! The "ASPL" checkpoint container.
//!
//! Layout: magic `ASPL`, version `u32`, header length `u32`, a JSON header,
//! then every tensor as little-endian float32 in header order. The header
//! carries a section tag, the producing configuration, tensor names and
//! shapes, and free-form extra state.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::optim::Adam;

pub const MAGIC: &[u8; 4] = b"ASPL";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub section: String,
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn new(section: &str, config: serde_json::Value, extra: serde_json::Value) -> Self {
        Self { header: Header { section: section.into(), config, tensors: Vec::new(), extra }, tensors: Vec::new() }
    }

    pub fn push(&mut self, name: &str, t: &Tensor) {
        self.header.tensors.push(TensorEntry { name: name.into(), rows: t.rows, cols: t.cols });
        self.tensors.push(t.clone());
    }

    pub fn push_params(&mut self, prefix: &str, p: &ParamSet) {
        for (n, t) in p.iter() {
            self.push(&format!("{prefix}{n}"), t);
        }
    }

    /// Stores Adam moments under `adam.m.*` / `adam.v.*`.
    pub fn push_adam(&mut self, p: &ParamSet, opt: &Adam) {
        for (i, (n, _)) in p.iter().enumerate() {
            self.push(&format!("adam.m.{n}"), &opt.m[i]);
            self.push(&format!("adam.v.{n}"), &opt.v[i]);
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.header
            .tensors
            .iter()
            .position(|e| e.name == name)
            .map(|i| &self.tensors[i])
            .ok_or_else(|| Error::Checkpoint(format!("tensor '{name}' not found")))
    }

    /// Collects all tensors whose names start with `prefix` (prefix stripped).
    pub fn params(&self, prefix: &str) -> ParamSet {
        let mut p = ParamSet::new();
        for (e, t) in self.header.tensors.iter().zip(&self.tensors) {
            if let Some(rest) = e.name.strip_prefix(prefix) {
                if !rest.starts_with("adam.") {
                    p.insert(rest, t.clone());
                }
            }
        }
        p
    }

    /// Restores Adam moments for the given parameters.
    pub fn restore_adam(&self, p: &ParamSet, opt: &mut Adam) -> Result<()> {
        for (i, (n, _)) in p.iter().enumerate() {
            opt.m[i] = self.get(&format!("adam.m.{n}"))?.clone();
            opt.v[i] = self.get(&format!("adam.v.{n}"))?.clone();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(12 + header.len() + 4 * self.tensors.iter().map(|t| t.data.len()).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[0..4] != MAGIC {
            return Err(Error::Checkpoint("missing ASPL magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = bytes.get(12..12 + hlen).ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body)?;
        let mut off = 12 + hlen;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let n = e.rows * e.cols;
            let raw = bytes.get(off..off + 4 * n).ok_or_else(|| Error::Checkpoint(format!("truncated tensor '{}'", e.name)))?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
            tensors.push(Tensor { rows: e.rows, cols: e.cols, data });
            off += 4 * n;
        }
        if off != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn expect_section(&self, section: &str) -> Result<()> {
        if self.header.section != section {
            return Err(Error::Checkpoint(format!("expected a '{section}' checkpoint, found '{}'", self.header.section)));
        }
        Ok(())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut p = ParamSet::new();
        p.insert("a", Tensor::from_vec(2, 2, vec![1.0, 0.5, -2.0, 0.25]).unwrap());
        p.insert("b", Tensor::zeros(1, 3));
        let mut c = Checkpoint::new("stage1", serde_json::json!({"k": 1}), serde_json::json!({"step": 3}));
        c.push_params("", &p);
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"ASPL");
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.params(""), p);
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(back.expect_section("stage2").is_err());
    }
}
