//! The `GF2C` checkpoint container: named little-endian tensors followed by
//! a JSON blob.
//!
//! Layout: magic `GF2C`, `u32` version, `u32` entry count, then per entry a
//! `u16` name length, the UTF-8 name, a `u8` dtype tag, a `u8` rank, `u32`
//! dims and the payload; finally a `u32` length and the JSON bytes.

use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};
use crate::nn::Params;
use crate::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"GF2C";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<S> {
    pub entries: Vec<(String, Tensor<S>)>,
    pub meta: Value,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str, entry: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::CorruptEntry { name: entry.to_string(), detail: format!("truncated {what}") });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str, entry: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what, entry)?.try_into().expect("4 bytes")))
    }
}

impl<S: Scalar> Checkpoint<S> {
    pub fn new(meta: Value) -> Self {
        Self { entries: Vec::new(), meta }
    }

    /// Appends every tensor of `params` as `prefix/name`.
    pub fn push_params(&mut self, prefix: &str, params: &Params<S>) {
        for (name, t) in params.iter() {
            self.entries.push((format!("{prefix}/{name}"), t.clone()));
        }
    }

    /// Appends `tensors` under the names of `params`.
    pub fn push_like(&mut self, prefix: &str, params: &Params<S>, tensors: &[Tensor<S>]) {
        for ((name, _), t) in params.iter().zip(tensors) {
            self.entries.push((format!("{prefix}/{name}"), t.clone()));
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Tensors named `prefix/name` for every parameter of `like`, with shapes checked.
    pub fn tensors_like(&self, prefix: &str, like: &Params<S>) -> Result<Vec<Tensor<S>>> {
        like.iter()
            .map(|(name, want)| {
                let full = format!("{prefix}/{name}");
                let t = self.get(&full).ok_or_else(|| Error::CorruptEntry { name: full.clone(), detail: "missing".into() })?;
                if t.shape() != want.shape() {
                    return Err(Error::CorruptEntry {
                        name: full,
                        detail: format!("shape {:?} in checkpoint, {:?} expected by the configuration", t.shape(), want.shape()),
                    });
                }
                Ok(t.clone())
            })
            .collect()
    }

    /// Overwrites `params` with the `prefix/…` entries.
    pub fn fill_params(&self, prefix: &str, params: &mut Params<S>) -> Result<()> {
        let loaded = self.tensors_like(prefix, params)?;
        for (slot, t) in params.values_mut().iter_mut().zip(loaded) {
            *slot = t;
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            let nb = name.as_bytes();
            let len = u16::try_from(nb.len()).map_err(|_| Error::CorruptEntry { name: name.clone(), detail: "name too long".into() })?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(nb);
            out.push(S::DTYPE);
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                v.put_le(&mut out);
            }
        }
        let meta = serde_json::to_vec(&self.meta)?;
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::BadMagic);
        }
        let mut r = Reader { bytes, pos: 4 };
        let version = r.u32("version", "<header>")?;
        if version != VERSION {
            return Err(Error::VersionMismatch { found: version, expected: VERSION });
        }
        let count = r.u32("entry count", "<header>")?;
        let mut entries = Vec::with_capacity(count.min(1 << 16) as usize);
        for i in 0..count {
            let placeholder = format!("<entry {i}>");
            let len = u16::from_le_bytes(r.take(2, "name length", &placeholder)?.try_into().expect("2 bytes")) as usize;
            let name = std::str::from_utf8(r.take(len, "name", &placeholder)?)
                .map_err(|_| Error::CorruptEntry { name: placeholder.clone(), detail: "name is not UTF-8".into() })?
                .to_string();
            let head = r.take(2, "dtype and rank", &name)?;
            if head[0] != S::DTYPE {
                return Err(Error::CorruptEntry { name, detail: format!("dtype tag {} where {} ({}) was expected", head[0], S::DTYPE, S::NAME) });
            }
            let shape = (0..head[1]).map(|_| r.u32("dims", &name).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let payload = r.take(n * S::BYTES, "payload", &name)?;
            let data = payload.chunks_exact(S::BYTES).map(S::get_le).collect();
            entries.push((name, Tensor::new(&shape, data)?));
        }
        let len = r.u32("metadata length", "<metadata>")? as usize;
        let meta = serde_json::from_slice(r.take(len, "metadata", "<metadata>")?)
            .map_err(|e| Error::CorruptEntry { name: "<metadata>".into(), detail: e.to_string() })?;
        if r.pos != bytes.len() {
            return Err(Error::CorruptEntry { name: "<metadata>".into(), detail: format!("{} trailing bytes", bytes.len() - r.pos) });
        }
        Ok(Self { entries, meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingCheckpoint(path.display().to_string()),
            _ => Error::Io(e),
        })?;
        Self::decode(&bytes)
    }
}
