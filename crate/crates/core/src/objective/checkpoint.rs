//! Binary checkpoint: `"EAGLE01"`, u16 version, 32-byte architecture
//! digest, u32 tensor count, then per tensor a u32-prefixed UTF-8 name,
//! u32 rank, u64 dims and little-endian f32 values. All integers are
//! little-endian.

use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use thiserror::Error;

use crate::compute::Tensor;
use crate::model::{Model, ModelConfig};

pub const MAGIC: &[u8; 7] = b"EAGLE01";
pub const VERSION: u16 = 1;
const EPOCH_KEY: &str = "meta.epoch";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u16),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint is missing tensor {0}")]
    MissingTensor(String),
    #[error("unexpected tensor {0} in checkpoint")]
    UnexpectedTensor(String),
    #[error("shape mismatch for {name}: configured {expected:?}, checkpoint {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint was written for a different architecture")]
    DigestMismatch,
}

/// Decoded file contents before validation.
#[derive(Clone, Debug, PartialEq)]
pub struct RawCheckpoint {
    pub version: u16,
    pub digest: [u8; 32],
    pub tensors: IndexMap<String, Tensor>,
}

fn encode(model: &Model, epoch: usize) -> Vec<u8> {
    let epoch_t = Tensor::vector(vec![epoch as f64]);
    let entries: Vec<(&str, &Tensor)> = model
        .params
        .iter()
        .chain(model.buffers.iter())
        .chain(std::iter::once((EPOCH_KEY, &epoch_t)))
        .collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&model.cfg.digest());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

/// Writes parameters and buffers (rounded to f32) plus the epoch counter.
pub fn save_checkpoint(model: &Model, epoch: usize, path: &Path) -> Result<(), CheckpointError> {
    let bytes = encode(model, epoch);
    // write-then-rename so an interrupted save never clobbers a good file
    let tmp = path.with_extension("tmp");
    let io = |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    };
    fs::write(&tmp, bytes).map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Corrupt(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn read_checkpoint(path: &Path) -> Result<RawCheckpoint, CheckpointError> {
    let buf = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&buf)
}

fn decode(buf: &[u8]) -> Result<RawCheckpoint, CheckpointError> {
    let mut r = Reader { buf, pos: 0 };
    if buf.len() < MAGIC.len() || &buf[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    r.pos = MAGIC.len();
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let digest: [u8; 32] = r.take(32, "digest")?.try_into().expect("32 bytes");
    let count = r.u32("tensor count")? as usize;
    let mut tensors = IndexMap::new();
    for i in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| CheckpointError::Corrupt(format!("tensor {i} name is not UTF-8")))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        if rank > 2 {
            return Err(CheckpointError::Corrupt(format!("{name}: rank {rank} is not supported")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u64("dims")? as usize);
        }
        let n: usize = dims.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or_else(|| CheckpointError::Corrupt(format!("{name}: size overflow")))?, &name)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let t = Tensor::new(dims, data).map_err(|e| CheckpointError::Corrupt(format!("{name}: {e}")))?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(CheckpointError::Corrupt(format!("duplicate tensor {name}")));
        }
    }
    if r.pos != buf.len() {
        return Err(CheckpointError::Corrupt(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(RawCheckpoint { version, digest, tensors })
}

/// Loads a checkpoint into a model of the configured architecture. Names
/// and shapes are validated first, then the architecture digest. Returns
/// the model and the stored epoch.
pub fn load_checkpoint(path: &Path, cfg: &ModelConfig) -> Result<(Model, usize), CheckpointError> {
    let mut raw = read_checkpoint(path)?;
    let mut model = Model::new(cfg.clone(), 0).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    for set in [&mut model.params, &mut model.buffers] {
        for (name, t) in set.iter_mut() {
            let stored = raw
                .tensors
                .shift_remove(name)
                .ok_or_else(|| CheckpointError::MissingTensor(name.to_string()))?;
            if stored.shape() != t.shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name: name.to_string(),
                    expected: t.shape().to_vec(),
                    found: stored.shape().to_vec(),
                });
            }
            *t = stored;
        }
    }
    let epoch = raw
        .tensors
        .shift_remove(EPOCH_KEY)
        .ok_or_else(|| CheckpointError::MissingTensor(EPOCH_KEY.into()))?;
    if let Some(extra) = raw.tensors.keys().next() {
        return Err(CheckpointError::UnexpectedTensor(extra.clone()));
    }
    if raw.digest != cfg.digest() {
        return Err(CheckpointError::DigestMismatch);
    }
    let e = epoch.data().first().copied().unwrap_or(-1.0);
    if !(e >= 0.0 && e.fract() == 0.0) {
        return Err(CheckpointError::Corrupt(format!("invalid epoch value {e}")));
    }
    Ok((model, e as usize))
}
