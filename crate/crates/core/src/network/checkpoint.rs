//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "CSCDNET\0"
//! version    u32      1
//! plan       9 x u32  point_mlp[2] fuse_mlp[2] attention expand_reduce expand_mlp[2] offset_hidden
//! stages     u32      stage count S
//! S x        u32 rate, u32 k_attention, u8 extractor, u8 use_residual, u8 use_position_encoding
//! tensors    u32      tensor count T
//! T x        u32 name length, name (UTF-8), u32 rank, rank x u64 extents, numel x f64 values
//! ```
//!
//! Tensors appear in [`NetworkParams::named_tensors`] order.

use std::fs;
use std::path::Path;

use super::config::{ChannelPlan, FeatureExtractor, StageConfig};
use super::params::NetworkParams;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CSCDNET\0";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint(params: &NetworkParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for w in params.plan.as_array() {
        out.extend_from_slice(&(w as u32).to_le_bytes());
    }
    out.extend_from_slice(&(params.stages.len() as u32).to_le_bytes());
    for s in &params.stages {
        let c = s.config;
        out.extend_from_slice(&(c.rate as u32).to_le_bytes());
        out.extend_from_slice(&(c.k_attention as u32).to_le_bytes());
        out.push(c.extractor.code());
        out.push(c.use_residual as u8);
        out.push(c.use_position_encoding as u8);
    }
    let tensors = params.named_tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn flag(&mut self, what: &str) -> Result<bool> {
        match self.u8(what)? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(Error::Checkpoint(format!("{what}: invalid flag byte {v}"))),
        }
    }
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<NetworkParams> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let mut plan = [0usize; 9];
    for w in &mut plan {
        *w = r.u32("channel plan")? as usize;
    }
    let plan = ChannelPlan::from_array(plan);
    let stage_count = r.u32("stage count")? as usize;
    let mut configs = Vec::with_capacity(stage_count);
    for _ in 0..stage_count {
        let rate = r.u32("stage rate")? as usize;
        let k_attention = r.u32("k_attention")? as usize;
        let code = r.u8("extractor")?;
        let extractor = FeatureExtractor::from_code(code)
            .ok_or_else(|| Error::Checkpoint(format!("unknown extractor code {code}")))?;
        configs.push(StageConfig {
            rate,
            k_attention,
            extractor,
            use_residual: r.flag("use_residual")?,
            use_position_encoding: r.flag("use_position_encoding")?,
        });
    }
    let mut params = NetworkParams::zeros(plan, &configs).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
    let count = r.u32("tensor count")? as usize;
    if count != names.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors for this channel plan, file has {count}",
            names.len()
        )));
    }
    for (expected, t) in names.iter().zip(params.tensors_mut()) {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "tensor name")?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        if name != expected {
            return Err(Error::Checkpoint(format!("expected tensor {expected}, found {name}")));
        }
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("extent")? as usize);
        }
        if shape != t.shape() {
            return Err(Error::Checkpoint(format!(
                "{name}: stored shape {shape:?} does not match the channel plan {:?}",
                t.shape()
            )));
        }
        let raw = r.take(t.numel() * 8, name)?;
        for (dst, chunk) in t.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - r.pos
        )));
    }
    Ok(params)
}

pub fn save_checkpoint(params: &NetworkParams, path: &Path) -> Result<()> {
    fs::write(path, write_checkpoint(params)).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint; with `expected` set, the stored channel plan and
/// stage configs must match it exactly.
pub fn load_checkpoint(path: &Path, expected: Option<(&ChannelPlan, &[StageConfig])>) -> Result<NetworkParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let params = read_checkpoint(&bytes)?;
    if let Some((plan, configs)) = expected {
        if params.plan != *plan {
            return Err(Error::Checkpoint(format!(
                "channel plan mismatch: file has {:?}, requested {plan:?}",
                params.plan
            )));
        }
        if params.configs() != configs {
            return Err(Error::Checkpoint(format!(
                "stage plan mismatch: file has {:?}, requested {configs:?}",
                params.configs()
            )));
        }
    }
    Ok(params)
}
