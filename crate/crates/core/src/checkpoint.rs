//! Single-file checkpoint archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "NOPDCKPT"
//! version u32
//! len     u64      byte length of the manifest
//! manifest         UTF-8 JSON
//! blob             f32 values of every tensor, in directory order
//! ```
//!
//! The manifest carries the run config, training progress, the RNG state,
//! and a directory of `{name, shape, offset}` entries with offsets counted
//! in f32 elements from the start of the blob.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ConditionMode, RunConfig};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"NOPDCKPT";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8;
const MAX_RANK: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Operator,
    Diffusion,
}

/// Serialisable position of a ChaCha8 stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// Decimal `u128`; kept as a string so JSON tools do not round it.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: hex::encode(rng.get_seed()), stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bytes = hex::decode(&self.seed).map_err(|e| Error::Checkpoint(format!("rng seed: {e}")))?;
        let seed: [u8; 32] = bytes.try_into().map_err(|_| Error::Checkpoint("rng seed must be 32 bytes".into()))?;
        let pos: u128 = self.word_pos.parse().map_err(|e| Error::Checkpoint(format!("rng word_pos: {e}")))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

/// Everything in the manifest except the tensor directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub config: RunConfig,
    pub phase: Phase,
    pub iteration: u64,
    pub condition: Option<ConditionMode>,
    pub rng: Option<RngState>,
    pub optimizer_steps: u64,
    pub operator_hash: Option<String>,
    pub denoiser_hash: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
    blob_sha256: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

impl Checkpoint {
    pub fn new(meta: CheckpointMeta) -> Self {
        Self { meta, tensors: BTreeMap::new() }
    }

    /// Add every tensor of `store` under its own name.
    pub fn insert_store(&mut self, store: &ParamStore<f32>) {
        for (name, t) in store.iter() {
            self.tensors.insert(name.to_string(), t.clone());
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.get(name)
    }

    /// Overwrite every parameter of `store` from this checkpoint. Fails if
    /// any is missing or has a different shape.
    pub fn load_store(&self, store: &mut ParamStore<f32>) -> Result<()> {
        let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
        for name in names {
            let t = self.get(&name).ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            store.assign(&name, t.clone())?;
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut blob = Vec::new();
        let mut tensors = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            tensors.push(TensorEntry { name: name.clone(), shape: t.shape().to_vec(), offset });
            offset += t.numel() as u64;
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = Manifest { meta: self.meta.clone(), tensors, blob_sha256: hex::encode(Sha256::digest(&blob)) };
        let json = serde_json::to_vec(&manifest).expect("manifest serialises");
        let mut out = Vec::with_capacity(HEADER_LEN + json.len() + blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&blob);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: String| Error::Checkpoint(msg);
        if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint archive (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
        let rest = &bytes[HEADER_LEN..];
        if len > rest.len() as u64 {
            return Err(bad(format!("manifest length {len} exceeds the file")));
        }
        let (json, blob) = rest.split_at(len as usize);
        let manifest: Manifest = serde_json::from_slice(json).map_err(|e| bad(format!("manifest: {e}")))?;
        manifest.meta.config.validate().map_err(|e| bad(format!("stored config: {e}")))?;
        if blob.len() % 4 != 0 {
            return Err(bad("tensor blob is not a whole number of f32 values".into()));
        }
        let digest = hex::encode(Sha256::digest(blob));
        if digest != manifest.blob_sha256 {
            return Err(bad("tensor blob checksum mismatch".into()));
        }
        let n_values = (blob.len() / 4) as u64;
        let mut tensors = BTreeMap::new();
        let mut expected = 0u64;
        for e in manifest.tensors {
            if e.shape.len() > MAX_RANK {
                return Err(bad(format!("tensor {} has rank {}", e.name, e.shape.len())));
            }
            let numel = e
                .shape
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
                .ok_or_else(|| bad(format!("tensor {} shape overflows", e.name)))?;
            if e.offset != expected {
                return Err(bad(format!("tensor {} at offset {}, expected {expected}", e.name, e.offset)));
            }
            let end = expected.checked_add(numel).filter(|&end| end <= n_values);
            let end = end.ok_or_else(|| bad(format!("tensor {} runs past the blob", e.name)))?;
            let data = blob[expected as usize * 4..end as usize * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            if tensors.insert(e.name.clone(), Tensor::from_vec(&e.shape, data)).is_some() {
                return Err(bad(format!("duplicate tensor {}", e.name)));
            }
            expected = end;
        }
        if expected != n_values {
            return Err(bad(format!("{} trailing values after the last tensor", n_values - expected)));
        }
        Ok(Self { meta: manifest.meta, tensors })
    }

    /// Write via a temporary file in the same directory, then rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode();
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(dir).map_err(|e| Error::Checkpoint(format!("cannot create {}: {e}", dir.display())))?;
        let file_name = path.file_name().ok_or_else(|| Error::Checkpoint(format!("{} is not a file path", path.display())))?;
        let tmp = dir.join(format!(".{}.tmp{}", file_name.to_string_lossy(), std::process::id()));
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
            fs::rename(&tmp, path)
        };
        write().map_err(|e| {
            let _ = fs::remove_file(&tmp);
            Error::Checkpoint(format!("cannot write {}: {e}", path.display()))
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Self::decode(&bytes)
    }
}
