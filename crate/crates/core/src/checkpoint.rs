//! Single-file archive of named f32 tensors plus a JSON header.
//!
//! Layout: the magic line, a little-endian `u64` header length, the JSON
//! header, then every tensor's data as little-endian `f32` in header order.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use lanegan_tensor::optim::{Adam, Sgd};
use lanegan_tensor::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

const MAGIC: &[u8] = b"LANEGAN-CKPT\n";
pub const FORMAT: &str = "lanegan-ckpt/1";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub kind: String,
    pub meta: serde_json::Value,
    tensors: BTreeMap<String, Tensor<f32>>,
}

fn ckpt_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

impl Archive {
    pub fn new(kind: &str, meta: serde_json::Value) -> Self {
        Self {
            kind: kind.to_string(),
            meta,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn insert_store(&mut self, prefix: &str, store: &ParamStore<f32>) {
        for (name, t) in store.named() {
            self.insert(format!("{prefix}/{name}"), t);
        }
    }

    /// Loads every tensor of `store` from entries named `prefix/<param>`.
    pub fn load_store(&self, prefix: &str, store: &mut ParamStore<f32>) -> Result<(), String> {
        let lead = format!("{prefix}/");
        let named: Vec<(String, Tensor<f32>)> = self
            .tensors
            .range(lead.clone()..)
            .take_while(|(k, _)| k.starts_with(&lead))
            .map(|(k, t)| (k[lead.len()..].to_string(), t.clone()))
            .collect();
        store.load_named(&named).map_err(|e| format!("{prefix}: {e}"))
    }

    pub fn insert_list(&mut self, prefix: &str, list: &[Tensor<f32>]) {
        for (i, t) in list.iter().enumerate() {
            self.insert(format!("{prefix}/{i:05}"), t.clone());
        }
    }

    pub fn list(&self, prefix: &str) -> Vec<Tensor<f32>> {
        let lead = format!("{prefix}/");
        self.tensors
            .range(lead.clone()..)
            .take_while(|(k, _)| k.starts_with(&lead))
            .map(|(_, t)| t.clone())
            .collect()
    }

    pub fn insert_adam(&mut self, prefix: &str, opt: &Adam<f32>) {
        self.insert_list(&format!("{prefix}/m"), &opt.m);
        self.insert_list(&format!("{prefix}/v"), &opt.v);
        self.insert(format!("{prefix}/step"), Tensor::scalar(opt.step as f32));
    }

    pub fn load_adam(&self, prefix: &str, opt: &mut Adam<f32>) -> Result<(), String> {
        let m = self.list(&format!("{prefix}/m"));
        let v = self.list(&format!("{prefix}/v"));
        let step = self
            .get(&format!("{prefix}/step"))
            .ok_or_else(|| format!("{prefix}: missing step"))?;
        if m.len() != opt.m.len() || v.len() != opt.v.len() {
            return Err(format!("{prefix}: optimizer state size mismatch"));
        }
        opt.m = m;
        opt.v = v;
        opt.step = step.item() as u64;
        Ok(())
    }

    pub fn insert_sgd(&mut self, prefix: &str, opt: &Sgd<f32>) {
        self.insert_list(&format!("{prefix}/velocity"), &opt.velocity);
    }

    pub fn load_sgd(&self, prefix: &str, opt: &mut Sgd<f32>) -> Result<(), String> {
        let vel = self.list(&format!("{prefix}/velocity"));
        if vel.len() != opt.velocity.len() {
            return Err(format!("{prefix}: optimizer state size mismatch"));
        }
        opt.velocity = vel;
        Ok(())
    }

    fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            format: FORMAT.to_string(),
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let payload: usize = self.tensors.values().map(Tensor::len).sum();
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len() + 4 * payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Writes the archive atomically and returns its content id.
    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        Ok(content_id(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let rest = bytes
            .strip_prefix(MAGIC)
            .ok_or_else(|| ckpt_err(path, "not a lanegan checkpoint"))?;
        if rest.len() < 8 {
            return Err(ckpt_err(path, "truncated header"));
        }
        let hlen = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes")) as usize;
        let rest = &rest[8..];
        if rest.len() < hlen {
            return Err(ckpt_err(path, "truncated header"));
        }
        let header: Header =
            serde_json::from_slice(&rest[..hlen]).map_err(|e| ckpt_err(path, e.to_string()))?;
        if header.format != FORMAT {
            return Err(ckpt_err(
                path,
                format!("unsupported format {:?}, expected {FORMAT:?}", header.format),
            ));
        }
        let mut blob = &rest[hlen..];
        let mut tensors = BTreeMap::new();
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            if blob.len() < 4 * n {
                return Err(ckpt_err(path, format!("truncated data for {}", entry.name)));
            }
            let data = blob[..4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            blob = &blob[4 * n..];
            tensors.insert(entry.name, Tensor::from_vec(&entry.shape, data));
        }
        if !blob.is_empty() {
            return Err(ckpt_err(path, "trailing bytes after tensor data"));
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            tensors,
        })
    }

    pub fn expect_kind(self, path: &Path, kind: &str) -> Result<Self> {
        if self.kind != kind {
            return Err(ckpt_err(path, format!("expected a {kind} checkpoint, found {}", self.kind)));
        }
        Ok(self)
    }
}

fn content_id(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .take(8)
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Content id of an existing checkpoint file.
pub fn checkpoint_id(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(content_id(&bytes))
}
