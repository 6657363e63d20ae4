//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "PAGN" | version: u32 | meta_len: u32 | meta (UTF-8 `key=value` lines)
//! | count: u32 | count x (name_len: u32, name, ndim: u32, dims: u64 x ndim, numel: u64)
//! | payloads: f32 x numel, in manifest order
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::autodiff::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::nn::ParamStore;

pub const MAGIC: &[u8; 4] = b"PAGN";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    /// Free-form metadata; `env_hash`, `mode` and `step` are always present.
    pub meta: BTreeMap<String, String>,
    pub arrays: Vec<ArrayEntry>,
}

impl Checkpoint {
    pub fn new(env_hash: &str, mode: &str, step: u64) -> Self {
        let mut meta = BTreeMap::new();
        meta.insert("env_hash".to_string(), env_hash.to_string());
        meta.insert("mode".to_string(), mode.to_string());
        meta.insert("step".to_string(), step.to_string());
        Self { version: VERSION, meta, arrays: Vec::new() }
    }

    pub fn env_hash(&self) -> &str {
        self.meta.get("env_hash").map(String::as_str).unwrap_or("")
    }

    pub fn mode(&self) -> &str {
        self.meta.get("mode").map(String::as_str).unwrap_or("")
    }

    pub fn step(&self) -> u64 {
        self.meta.get("step").and_then(|s| s.parse().ok()).unwrap_or(0)
    }

    /// Appends every parameter of `store`, converted to f32.
    pub fn add_store<T: Scalar>(&mut self, store: &ParamStore<T>) {
        for (name, t) in store.iter() {
            self.arrays.push(ArrayEntry { name: name.to_string(), shape: t.shape().to_vec(), data: t.iter().map(|v| v.as_f32()).collect() });
        }
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.arrays.iter().any(|a| a.name.starts_with(prefix))
    }

    /// Overwrites every parameter of `store` from the matching entries.
    pub fn restore<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        let by_name: BTreeMap<&str, &ArrayEntry> = self.arrays.iter().map(|a| (a.name.as_str(), a)).collect();
        let names: Vec<String> = store.names().to_vec();
        for (name, t) in names.iter().zip(store.values_mut()) {
            let e = by_name.get(name.as_str()).ok_or_else(|| Error::checkpoint(name, "missing from checkpoint"))?;
            if e.shape != t.shape() {
                return Err(Error::checkpoint(name, format!("shape {:?} does not match expected {:?}", e.shape, t.shape())));
            }
            *t = Tensor::from_shape_vec(t.raw_dim(), e.data.iter().map(|&v| T::of(v as f64)).collect()).expect("shape checked");
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        let meta: String = self.meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for a in &self.arrays {
            out.extend_from_slice(&(a.name.len() as u32).to_le_bytes());
            out.extend_from_slice(a.name.as_bytes());
            out.extend_from_slice(&(a.shape.len() as u32).to_le_bytes());
            for &d in &a.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&(a.data.len() as u64).to_le_bytes());
        }
        for a in &self.arrays {
            for v in &a.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::checkpoint("magic", "not a checkpoint file"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::checkpoint("version", format!("found {version}, expected {VERSION}")));
        }
        let meta_len = r.u32("metadata")? as usize;
        let meta_text = std::str::from_utf8(r.take(meta_len, "metadata")?).map_err(|_| Error::checkpoint("metadata", "not UTF-8"))?;
        let mut meta = BTreeMap::new();
        for line in meta_text.lines() {
            let (k, v) = line.split_once('=').ok_or_else(|| Error::checkpoint("metadata", format!("malformed line {line:?}")))?;
            meta.insert(k.to_string(), v.to_string());
        }
        for key in ["env_hash", "mode", "step"] {
            if !meta.contains_key(key) {
                return Err(Error::checkpoint(key, "missing from metadata"));
            }
        }
        let count = r.u32("manifest")? as usize;
        let mut manifest = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_len = r.u32("manifest")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "manifest")?)
                .map_err(|_| Error::checkpoint("manifest", "name is not UTF-8"))?
                .to_string();
            let ndim = r.u32("manifest")? as usize;
            let shape = (0..ndim).map(|_| r.u64("manifest").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = r.u64("manifest")? as usize;
            if shape.iter().product::<usize>() != numel {
                return Err(Error::checkpoint(format!("manifest:{name}"), format!("shape {shape:?} disagrees with count {numel}")));
            }
            manifest.push((name, shape, numel));
        }
        let mut arrays = Vec::with_capacity(manifest.len());
        for (name, shape, numel) in manifest {
            let field = format!("payload:{name}");
            let raw = r.take(numel * 4, &field)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            arrays.push(ArrayEntry { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::checkpoint("payload", format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { version, meta, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Loads and rejects checkpoints written for a different environment.
    pub fn load_for_env(path: &Path, env_hash: &str) -> Result<Self> {
        let c = Self::load(path)?;
        if c.env_hash() != env_hash {
            return Err(Error::checkpoint("env_hash", format!("checkpoint has {}, environment has {env_hash}", c.env_hash())));
        }
        Ok(c)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::checkpoint(field, "truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        let b = self.take(4, field)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        let b = self.take(8, field)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}
