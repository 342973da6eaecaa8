//! Binary checkpoints: a version tag, the config echo, flat named
//! parameter arrays (name → shape → little-endian f32), both optimisers'
//! moment estimates, the trainer's random-stream snapshot and a SHA-256
//! trailer that rejects truncated or corrupted files.

use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::optim::AdamState;

use super::TrainConfig;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"HCLEANCK";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint format version {0}")]
    UnsupportedVersion(u32),
    #[error("checksum mismatch: file is truncated or corrupted")]
    ChecksumMismatch,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("bad config block: {0}")]
    Meta(#[from] serde_json::Error),
}

/// Snapshot of the trainer's ChaCha stream; restoring reproduces the next
/// draw exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct RngSnapshot {
    pub seed: [u8; 32],
    pub word_pos: u128,
    pub stream: u64,
}

impl RngSnapshot {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngSnapshot {
            seed: rng.get_seed(),
            word_pos: rng.get_word_pos(),
            stream: rng.get_stream(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// In-memory image of a checkpoint file.
pub struct Checkpoint {
    pub version: u32,
    pub config: TrainConfig,
    pub epoch: usize,
    pub params: Vec<(String, ArrayD<f32>)>,
    pub opt_g: AdamState,
    pub opt_d: AdamState,
    pub rng: RngSnapshot,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: TrainConfig,
    epoch: usize,
    rng_seed: [u8; 32],
    rng_word_pos_hi: u64,
    rng_word_pos_lo: u64,
    rng_stream: u64,
}

fn put_array(buf: &mut Vec<u8>, name: &str, arr: &ArrayD<f32>) {
    buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(arr.ndim() as u8);
    for &d in arr.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in arr.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_named_block(buf: &mut Vec<u8>, arrays: &[(String, ArrayD<f32>)]) {
    buf.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for (name, arr) in arrays {
        put_array(buf, name, arr);
    }
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.data.len() {
            return Err(CheckpointError::Corrupt("unexpected end of data".into()));
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn array(&mut self) -> Result<(String, ArrayD<f32>), CheckpointError> {
        let name_len = self.u16()? as usize;
        let name = String::from_utf8(self.take(name_len)?.to_vec())
            .map_err(|_| CheckpointError::Corrupt("parameter name not utf-8".into()))?;
        let ndim = self.u8()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(self.u32()? as usize);
        }
        let count: usize = dims.iter().product();
        let bytes = self.take(count * 4)?;
        let mut values = Vec::with_capacity(count);
        for chunk in bytes.chunks_exact(4) {
            values.push(f32::from_le_bytes(chunk.try_into().unwrap()));
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&dims), values)
            .map_err(|e| CheckpointError::Corrupt(format!("array `{name}`: {e}")))?;
        Ok((name, arr))
    }

    fn named_block(&mut self) -> Result<Vec<(String, ArrayD<f32>)>, CheckpointError> {
        let n = self.u32()? as usize;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(self.array()?);
        }
        Ok(out)
    }
}

/// Serialises and writes a checkpoint, checksummed, via a temp file and
/// rename so a crash never leaves a half-written checkpoint behind.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let io = |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    };
    let meta = Meta {
        config: ckpt.config.clone(),
        epoch: ckpt.epoch,
        rng_seed: ckpt.rng.seed,
        rng_word_pos_hi: (ckpt.rng.word_pos >> 64) as u64,
        rng_word_pos_lo: ckpt.rng.word_pos as u64,
        rng_stream: ckpt.rng.stream,
    };
    let meta_json = serde_json::to_vec(&meta)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&ckpt.version.to_le_bytes());
    buf.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&meta_json);
    put_named_block(&mut buf, &ckpt.params);
    for opt in [&ckpt.opt_g, &ckpt.opt_d] {
        buf.extend_from_slice(&opt.t.to_le_bytes());
        put_named_block(&mut buf, &opt.m);
        put_named_block(&mut buf, &opt.v);
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);

    let tmp = path.with_extension("tmp");
    {
        let mut file = std::fs::File::create(&tmp).map_err(io)?;
        file.write_all(&buf).map_err(io)?;
        file.sync_all().map_err(io)?;
    }
    std::fs::rename(&tmp, path).map_err(io)?;
    Ok(())
}

/// Follows a `latest` marker file to the checkpoint it names.
pub fn resolve_checkpoint_path(path: &Path) -> Result<PathBuf, CheckpointError> {
    if path.file_name().and_then(|n| n.to_str()) == Some("latest") && path.is_file() {
        let io = |source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        };
        let name = std::fs::read_to_string(path).map_err(io)?;
        let parent = path.parent().unwrap_or_else(|| Path::new(""));
        return Ok(parent.join(name.trim()));
    }
    Ok(path.to_path_buf())
}

/// Reads and verifies a checkpoint. The checksum is checked before any
/// state is decoded, so a truncated file loads nothing.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let path = resolve_checkpoint_path(path)?;
    let io = |source| CheckpointError::Io {
        path: path.clone(),
        source,
    };
    let data = std::fs::read(&path).map_err(io)?;
    if data.len() < MAGIC.len() + 4 + 32 {
        return Err(CheckpointError::ChecksumMismatch);
    }
    let (body, trailer) = data.split_at(data.len() - 32);
    let digest = Sha256::digest(body);
    if digest.as_slice() != trailer {
        return Err(CheckpointError::ChecksumMismatch);
    }
    let mut cur = Cursor {
        data: body,
        pos: 0,
    };
    if cur.take(8)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let meta_len = cur.u32()? as usize;
    let meta: Meta = serde_json::from_slice(cur.take(meta_len)?)?;
    let params = cur.named_block()?;
    let mut opts = Vec::new();
    for _ in 0..2 {
        let t = cur.u64()?;
        let m = cur.named_block()?;
        let v = cur.named_block()?;
        opts.push(AdamState { t, m, v });
    }
    let opt_d = opts.pop().unwrap();
    let opt_g = opts.pop().unwrap();
    Ok(Checkpoint {
        version,
        config: meta.config,
        epoch: meta.epoch,
        params,
        opt_g,
        opt_d,
        rng: RngSnapshot {
            seed: meta.rng_seed,
            word_pos: ((meta.rng_word_pos_hi as u128) << 64) | meta.rng_word_pos_lo as u128,
            stream: meta.rng_stream,
        },
    })
}
