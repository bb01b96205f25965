//! Binary checkpoint: magic, version, JSON manifest, raw little-endian payload.
//!
//! ```text
//! b"RHPOCKPT" | u32 version | u64 manifest length | manifest JSON | payload
//! ```
//!
//! The manifest lists each tensor's store, name, role (value or an Adam
//! moment), shape, dtype and byte offset into the payload. With the 64-bit
//! dtype a save/load round trip is bit-exact.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::Param;
use super::{AdamConfig, DiffError, ParamStore, Tensor};

const MAGIC: &[u8; 8] = b"RHPOCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointDtype {
    #[default]
    F64,
    F32,
}

impl CheckpointDtype {
    fn width(self) -> usize {
        match self {
            Self::F64 => 8,
            Self::F32 => 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Role {
    Value,
    M,
    V,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    store: String,
    name: String,
    role: Role,
    shape: Vec<usize>,
    dtype: CheckpointDtype,
    offset: u64,
    trainable: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct StoreEntry {
    name: String,
    step: u64,
    adam: AdamConfig,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    stores: Vec<StoreEntry>,
    tensors: Vec<TensorEntry>,
    metadata: serde_json::Value,
}

/// Named parameter stores plus free-form metadata.
#[derive(Clone, Debug, Default)]
pub struct Checkpoint {
    pub stores: BTreeMap<String, ParamStore>,
    pub metadata: serde_json::Value,
}

impl Checkpoint {
    pub fn new(metadata: serde_json::Value) -> Self {
        Self { stores: BTreeMap::new(), metadata }
    }

    pub fn with_store(mut self, name: impl Into<String>, store: &ParamStore) -> Self {
        self.stores.insert(name.into(), store.clone());
        self
    }

    pub fn store(&self, name: &str) -> Result<&ParamStore, DiffError> {
        self.stores.get(name).ok_or_else(|| DiffError::Checkpoint(format!("missing store `{name}`")))
    }

    /// Serializes to bytes; `moments` also stores the Adam state.
    pub fn to_bytes(&self, dtype: CheckpointDtype, moments: bool) -> Result<Vec<u8>, DiffError> {
        let mut payload = Vec::new();
        let mut tensors = Vec::new();
        let mut stores = Vec::new();
        let mut put = |store: &str, name: &str, role: Role, shape: &[usize], data: &[f64], trainable: bool| {
            tensors.push(TensorEntry {
                store: store.to_string(),
                name: name.to_string(),
                role,
                shape: shape.to_vec(),
                dtype,
                offset: payload.len() as u64,
                trainable,
            });
            for v in data {
                match dtype {
                    CheckpointDtype::F64 => payload.extend_from_slice(&v.to_le_bytes()),
                    CheckpointDtype::F32 => payload.extend_from_slice(&(*v as f32).to_le_bytes()),
                }
            }
        };
        for (sname, store) in &self.stores {
            stores.push(StoreEntry { name: sname.clone(), step: store.step(), adam: store.adam_config() });
            for (pname, p) in store.iter() {
                put(sname, pname, Role::Value, p.value.shape(), p.value.data(), p.trainable);
                if moments {
                    put(sname, pname, Role::M, p.value.shape(), p.first_moment(), p.trainable);
                    put(sname, pname, Role::V, p.value.shape(), p.second_moment(), p.trainable);
                }
            }
        }
        let manifest = Manifest { version: VERSION, stores, tensors, metadata: self.metadata.clone() };
        let json = serde_json::to_vec(&manifest).map_err(|e| DiffError::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(8 + 4 + 8 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DiffError> {
        let bad = |m: &str| DiffError::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(DiffError::Checkpoint(format!("unsupported version {version}")));
        }
        let mlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if body.len() < mlen {
            return Err(bad("truncated manifest"));
        }
        let manifest: Manifest =
            serde_json::from_slice(&body[..mlen]).map_err(|e| DiffError::Checkpoint(e.to_string()))?;
        let payload = &body[mlen..];

        let mut values: BTreeMap<(String, String), (Tensor, bool)> = BTreeMap::new();
        let mut moments: BTreeMap<(String, String, Role), Vec<f64>> = BTreeMap::new();
        for t in &manifest.tensors {
            let n: usize = t.shape.iter().product();
            let w = t.dtype.width();
            let start = t.offset as usize;
            let end = start + n * w;
            if end > payload.len() {
                return Err(DiffError::Checkpoint(format!("tensor `{}` runs past payload", t.name)));
            }
            let data: Vec<f64> = payload[start..end]
                .chunks_exact(w)
                .map(|c| match t.dtype {
                    CheckpointDtype::F64 => f64::from_le_bytes(c.try_into().expect("8 bytes")),
                    CheckpointDtype::F32 => f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64,
                })
                .collect();
            let key = (t.store.clone(), t.name.clone());
            match t.role {
                Role::Value => {
                    values.insert(key, (Tensor::new(t.shape.clone(), data)?, t.trainable));
                }
                role => {
                    moments.insert((key.0, key.1, role), data);
                }
            }
        }

        let mut stores = BTreeMap::new();
        for s in &manifest.stores {
            let mut store = ParamStore::with_adam(s.adam);
            store.set_step(s.step);
            stores.insert(s.name.clone(), store);
        }
        for ((sname, pname), (value, trainable)) in values {
            let store = stores.get_mut(&sname).ok_or_else(|| bad("tensor refers to unknown store"))?;
            let n = value.len();
            let m = moments.remove(&(sname.clone(), pname.clone(), Role::M)).unwrap_or_else(|| vec![0.0; n]);
            let v = moments.remove(&(sname.clone(), pname.clone(), Role::V)).unwrap_or_else(|| vec![0.0; n]);
            store.insert_param(pname, Param::restore(value, trainable, m, v));
        }
        Ok(Self { stores, metadata: manifest.metadata })
    }
}

pub fn save_checkpoint(
    path: &Path,
    ckpt: &Checkpoint,
    dtype: CheckpointDtype,
    moments: bool,
) -> Result<(), DiffError> {
    let bytes = ckpt.to_bytes(dtype, moments)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, DiffError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    Checkpoint::from_bytes(&bytes)
}
