//! Binary model checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic    8 bytes  "FIGCKPT\0"
//! version  u32
//! n_dims   u32, then n_dims x u64 layer widths
//! command  u32 length + UTF-8 bytes
//! seed     u64
//! epoch    u64
//! rng      u64      summary of the generator state that produced the model
//! buffers  per layer: weight (in x out, row-major) then bias, as f64
//! checksum u64      FNV-1a over every preceding byte
//! ```

use std::fs;
use std::path::Path;

use crate::autograd::Tensor;
use crate::discriminator::{Discriminator, Layer};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"FIGCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CheckpointMeta {
    pub command: String,
    pub seed: u64,
    pub epoch: u64,
    pub rng_summary: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Discriminator,
    pub meta: CheckpointMeta,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

pub fn encode(model: &Discriminator, meta: &CheckpointMeta) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + 8 * model.num_params());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(model.dims().len() as u32).to_le_bytes());
    for &d in model.dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.extend_from_slice(&(meta.command.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.command.as_bytes());
    for v in [meta.seed, meta.epoch, meta.rng_summary] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for p in model.params() {
        for v in p.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum = fnv1a(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::CheckpointCorrupt(format!(
                "truncated while reading {what}: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::CheckpointCorrupt("buffer size overflow".into()))?, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::CheckpointCorrupt("bad magic; not a checkpoint file".into()));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let n_dims = r.u32("layer count")? as usize;
    if !(2..=64).contains(&n_dims) {
        return Err(Error::CheckpointCorrupt(format!("implausible layer count {n_dims}")));
    }
    let dims = (0..n_dims)
        .map(|_| r.u64("layer width").map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let cmd_len = r.u32("command length")? as usize;
    let command = String::from_utf8(r.take(cmd_len, "command")?.to_vec())
        .map_err(|_| Error::CheckpointCorrupt("command is not UTF-8".into()))?;
    let meta = CheckpointMeta {
        command,
        seed: r.u64("seed")?,
        epoch: r.u64("epoch")?,
        rng_summary: r.u64("rng summary")?,
    };
    let mut layers = Vec::with_capacity(n_dims - 1);
    for w in dims.windows(2) {
        let weight = r.f64s(w[0] * w[1], "weight buffer")?;
        let bias = r.f64s(w[1], "bias buffer")?;
        layers.push(Layer {
            weight: Tensor::matrix(w[0], w[1], weight).map_err(|e| Error::CheckpointCorrupt(e.to_string()))?,
            bias: Tensor::matrix(1, w[1], bias).map_err(|e| Error::CheckpointCorrupt(e.to_string()))?,
        });
    }
    let body_end = r.pos;
    let stored = r.u64("checksum")?;
    if r.pos != bytes.len() {
        return Err(Error::CheckpointCorrupt(format!(
            "{} trailing bytes after checksum",
            bytes.len() - r.pos
        )));
    }
    if stored != fnv1a(&bytes[..body_end]) {
        return Err(Error::CheckpointCorrupt("checksum mismatch".into()));
    }
    let model = Discriminator::from_layers(layers).map_err(|e| Error::CheckpointCorrupt(e.to_string()))?;
    Ok(Checkpoint { model, meta })
}

pub fn save_checkpoint(model: &Discriminator, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    fs::write(path, encode(model, meta))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode(&fs::read(path)?)
}

/// Loads a checkpoint and checks its layer widths against `dims`.
pub fn load_checkpoint_with_dims(path: &Path, dims: &[usize]) -> Result<Checkpoint> {
    let ck = load_checkpoint(path)?;
    if ck.model.dims() != dims {
        return Err(Error::DimensionMismatch {
            expected: dims.to_vec(),
            found: ck.model.dims().to_vec(),
        });
    }
    Ok(ck)
}
