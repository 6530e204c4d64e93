use crate::error::{NdError, Result};
use crate::real::Real;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.bin";

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors, addressed by [`ParamId`].
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    index: HashMap<String, ParamId>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CheckpointManifest {
    pub dtype: String,
    pub params: Vec<CheckpointEntry>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(NdError::shape("ParamStore::set", self.values[id.0].shape(), value.shape()));
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Copies every parameter of `other` whose name exists here. Returns the
    /// number copied; a shape disagreement on a shared name is an error.
    pub fn load_matching(&mut self, other: &ParamStore<T>) -> Result<usize> {
        let mut n = 0;
        for (name, value) in other.names.iter().zip(&other.values) {
            if let Some(id) = self.id(name) {
                self.set(id, value.clone())?;
                n += 1;
            }
        }
        Ok(n)
    }

    /// Largest absolute elementwise difference over parameters sharing a name.
    pub fn max_abs_diff(&self, other: &ParamStore<T>, prefix: &str) -> f64 {
        let mut worst = 0.0f64;
        for (name, value) in self.names.iter().zip(&self.values) {
            if !name.starts_with(prefix) {
                continue;
            }
            if let Some(id) = other.id(name) {
                worst = worst.max(value.max_abs_diff(other.get(id)));
            }
        }
        worst
    }

    /// Writes `manifest.json` plus a little-endian f32 blob into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut blob = Vec::with_capacity(self.num_scalars() * 4);
        let mut entries = Vec::with_capacity(self.len());
        for (name, value) in self.names.iter().zip(&self.values) {
            entries.push(CheckpointEntry {
                name: name.clone(),
                shape: value.shape().to_vec(),
                offset: blob.len() as u64,
            });
            for v in value.data() {
                blob.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        }
        let manifest = CheckpointManifest {
            dtype: "f32".into(),
            params: entries,
        };
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
        fs::File::create(dir.join(BLOB_FILE))?.write_all(&blob)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: CheckpointManifest =
            serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
        let blob = fs::read(dir.join(BLOB_FILE))?;
        Self::from_parts(&manifest, &blob)
    }

    pub fn from_parts(manifest: &CheckpointManifest, blob: &[u8]) -> Result<Self> {
        if manifest.dtype != "f32" {
            return Err(NdError::Format {
                offset: 0,
                msg: format!("unsupported dtype {}", manifest.dtype),
            });
        }
        let mut store = ParamStore::new();
        let mut expected_end = 0u64;
        for e in &manifest.params {
            let n: usize = e.shape.iter().product();
            let end = e.offset + 4 * n as u64;
            if e.offset != expected_end {
                return Err(NdError::Format {
                    offset: e.offset,
                    msg: format!("parameter {} does not follow the previous one", e.name),
                });
            }
            if end > blob.len() as u64 {
                return Err(NdError::Format {
                    offset: blob.len() as u64,
                    msg: format!("blob truncated inside parameter {}", e.name),
                });
            }
            let data = blob[e.offset as usize..end as usize]
                .chunks_exact(4)
                .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
                .collect();
            store.add(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
            expected_end = end;
        }
        if expected_end != blob.len() as u64 {
            return Err(NdError::Format {
                offset: expected_end,
                msg: "trailing bytes after the last parameter".into(),
            });
        }
        Ok(store)
    }
}
