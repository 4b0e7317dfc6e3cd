//! Binary checkpoint format.
//!
//! ```text
//! magic    "EXPO1" (5 bytes)
//! version  u32 LE
//! digest   32 bytes, vocabulary digest
//! config   u32 LE length + JSON {policy config, vocab_size, pad, eos}
//! step     u64 LE
//! count    u64 LE
//! params   count × f64 LE, in layout order
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{PolicyConfig, PolicyParams, TokenLayout};
use crate::error::{CheckpointError, Error, Result};
use crate::scalar::Scalar;
use crate::vocab::{TokenId, Vocab};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"EXPO1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<S> {
    pub params: PolicyParams<S>,
    pub vocab_digest: [u8; 32],
    pub step: u64,
}

#[derive(Serialize, Deserialize)]
struct ConfigBlock {
    policy: PolicyConfig,
    vocab_size: usize,
    pad: u16,
    eos: u16,
}

pub fn save_checkpoint<S: Scalar>(params: &PolicyParams<S>, vocab: &Vocab, step: u64, path: &Path) -> Result<()> {
    if vocab.len() != params.vocab_size() {
        return Err(Error::invalid(format!(
            "vocabulary has {} tokens, policy expects {}",
            vocab.len(),
            params.vocab_size()
        )));
    }
    let t = params.tokens();
    let block = serde_json::to_vec(&ConfigBlock {
        policy: params.config().clone(),
        vocab_size: t.vocab_size,
        pad: t.pad.0,
        eos: t.eos.0,
    })?;
    let mut buf = Vec::with_capacity(64 + block.len() + 8 * params.param_count());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&vocab.digest());
    buf.extend_from_slice(&(block.len() as u32).to_le_bytes());
    buf.extend_from_slice(&block);
    buf.extend_from_slice(&step.to_le_bytes());
    buf.extend_from_slice(&(params.param_count() as u64).to_le_bytes());
    for x in params.as_slice() {
        buf.extend_from_slice(&x.as_f64().to_le_bytes());
    }
    let tmp = path.with_extension("tmp");
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Truncated);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Loads a checkpoint, verifying it was written against `vocab`.
pub fn load_checkpoint<S: Scalar>(path: &Path, vocab: &Vocab) -> Result<Checkpoint<S>> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let fail = |kind| Error::Checkpoint { path: path.to_path_buf(), kind };
    let mut r = Reader { buf: &buf, pos: 0 };
    let magic = r.take(CHECKPOINT_MAGIC.len()).map_err(|_| fail(CheckpointError::BadMagic))?;
    if magic != CHECKPOINT_MAGIC {
        return Err(fail(CheckpointError::BadMagic));
    }
    let version = r.u32().map_err(fail)?;
    if version != CHECKPOINT_VERSION {
        return Err(fail(CheckpointError::Version(version)));
    }
    let mut digest = [0u8; 32];
    digest.copy_from_slice(r.take(32).map_err(fail)?);
    if digest != vocab.digest() {
        return Err(fail(CheckpointError::DigestMismatch));
    }
    let n = r.u32().map_err(fail)? as usize;
    let block: ConfigBlock = serde_json::from_slice(r.take(n).map_err(fail)?)
        .map_err(|e| fail(CheckpointError::Header(e.to_string())))?;
    let step = r.u64().map_err(fail)?;
    let count = r.u64().map_err(fail)? as usize;
    let raw = r.take(count.checked_mul(8).ok_or(fail(CheckpointError::Truncated))?).map_err(fail)?;
    if r.pos != buf.len() {
        return Err(fail(CheckpointError::Header(format!("{} trailing bytes", buf.len() - r.pos))));
    }
    let tokens = TokenLayout { vocab_size: block.vocab_size, pad: TokenId(block.pad), eos: TokenId(block.eos) };
    if tokens != TokenLayout::of(vocab) {
        return Err(fail(CheckpointError::Header("token layout differs from vocabulary".into())));
    }
    let data = raw.chunks_exact(8).map(|c| S::of(f64::from_le_bytes(c.try_into().unwrap()))).collect();
    let params = PolicyParams::from_flat(block.policy, tokens, data)
        .map_err(|e| fail(CheckpointError::Header(e.to_string())))?;
    Ok(Checkpoint { params, vocab_digest: digest, step })
}
