//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "TCAP" | u32 version | u32 config_len | config (UTF-8 `key=value` lines)
//!        | u32 record_count
//!        | record*: u32 name_len | name | u32 rank | u64 dim * rank | f64 * numel
//! ```
//!
//! Training metadata travels in the config block under the `meta.` prefix.
//! Scalars are always stored as `f64`, whatever precision trained them.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"TCAP";
pub const CHECKPOINT_VERSION: u32 = 1;
const META_PREFIX: &str = "meta.";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (magic {0:?})")]
    BadMagic([u8; 4]),

    #[error("checkpoint format version {found} is not supported (expected {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error("checkpoint has no tensor named `{0}`")]
    MissingTensor(String),

    #[error("checkpoint has no config key `{0}`")]
    MissingKey(String),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingMetadata {
    pub epoch: usize,
    pub seed: u64,
    pub loss_kind: String,
    /// Free-form run facts (recorded accuracy, data source, ...).
    pub extra: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: BTreeMap<String, String>,
    pub metadata: TrainingMetadata,
    pub tensors: BTreeMap<String, Tensor<f64>>,
}

impl Default for Checkpoint {
    fn default() -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            config: BTreeMap::new(),
            metadata: TrainingMetadata::default(),
            tensors: BTreeMap::new(),
        }
    }
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Result<&Tensor<f64>, CheckpointError> {
        self.tensors
            .get(name)
            .ok_or_else(|| CheckpointError::MissingTensor(name.to_string()))
    }

    pub fn config_value(&self, key: &str) -> Result<&str, CheckpointError> {
        self.config
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| CheckpointError::MissingKey(key.to_string()))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let mut lines = BTreeMap::new();
        for (k, v) in &self.config {
            if k.starts_with(META_PREFIX) {
                return Err(CheckpointError::Corrupt(format!(
                    "config key `{k}` uses the reserved `{META_PREFIX}` prefix"
                )));
            }
            lines.insert(k.clone(), v.clone());
        }
        lines.insert(format!("{META_PREFIX}epoch"), self.metadata.epoch.to_string());
        lines.insert(format!("{META_PREFIX}seed"), self.metadata.seed.to_string());
        lines.insert(format!("{META_PREFIX}loss"), self.metadata.loss_kind.clone());
        for (k, v) in &self.metadata.extra {
            lines.insert(format!("{META_PREFIX}x.{k}"), v.clone());
        }
        let mut config = String::new();
        for (k, v) in &lines {
            if k.is_empty() || k.contains(['=', '\n']) || v.contains('\n') {
                return Err(CheckpointError::Corrupt(format!(
                    "config entry `{k}` cannot be encoded as a key=value line"
                )));
            }
            config.push_str(k);
            config.push('=');
            config.push_str(v);
            config.push('\n');
        }

        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&self.format_version.to_le_bytes());
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(config.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().expect("four bytes");
        if magic != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::UnsupportedVersion {
                found: version,
                supported: CHECKPOINT_VERSION,
            });
        }
        let config_len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(config_len)?)
            .map_err(|_| CheckpointError::Corrupt("config block is not UTF-8".into()))?;

        let mut config = BTreeMap::new();
        let mut metadata = TrainingMetadata::default();
        for line in text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CheckpointError::Corrupt(format!("config line `{line}`")))?;
            match k.strip_prefix(META_PREFIX) {
                Some("epoch") => metadata.epoch = parse_meta(k, v)?,
                Some("seed") => metadata.seed = parse_meta(k, v)?,
                Some("loss") => metadata.loss_kind = v.to_string(),
                Some(other) => {
                    let key = other
                        .strip_prefix("x.")
                        .ok_or_else(|| CheckpointError::Corrupt(format!("unknown metadata key `{k}`")))?;
                    metadata.extra.insert(key.to_string(), v.to_string());
                }
                None => {
                    config.insert(k.to_string(), v.to_string());
                }
            }
        }

        let count = r.u32()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| CheckpointError::Corrupt("tensor name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            if rank == 0 || rank > 8 {
                return Err(CheckpointError::Corrupt(format!("tensor `{name}` has rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n > 0 && n <= r.remaining() / 8)
                .ok_or_else(|| CheckpointError::Corrupt(format!("tensor `{name}` has bad shape {shape:?}")))?;
            let data = r
                .take(numel * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(CheckpointError::Corrupt(format!("duplicate tensor `{name}`")));
            }
        }
        if r.remaining() != 0 {
            return Err(CheckpointError::Corrupt(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Self {
            format_version: version,
            config,
            metadata,
            tensors,
        })
    }
}

fn parse_meta<V: std::str::FromStr>(key: &str, value: &str) -> Result<V, CheckpointError> {
    value
        .parse()
        .map_err(|_| CheckpointError::Corrupt(format!("`{key}` has non-numeric value `{value}`")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.remaining() < n {
            return Err(CheckpointError::Corrupt(format!(
                "unexpected end of data at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> crate::Result<()> {
    fs::write(path, ckpt.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> crate::Result<Checkpoint> {
    Ok(Checkpoint::from_bytes(&fs::read(path)?)?)
}
