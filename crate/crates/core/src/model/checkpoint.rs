//! Binary checkpoint container. All integers and floats are little endian.
//!
//! ```text
//! magic      8 bytes   "ISETCKPT"
//! version    u32       1
//! cfg_len    u32       byte length of the config JSON
//! config     cfg_len   UTF-8 JSON of ModelConfig
//! dtype      u8        4 = f32, 8 = f64
//! count      u32       number of tensors
//! per tensor:
//!   name_len u32, name bytes (UTF-8)
//!   rank     u32, dims as u64 × rank
//!   data     product(dims) × dtype bytes, row major
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::tensor::{Float, Tensor};

use super::{ModelConfig, ModelError, ModelParams};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ISETCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

fn bad(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

pub fn write_checkpoint<F: Float, W: Write>(params: &ModelParams<F>, mut w: W) -> Result<(), ModelError> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let cfg = serde_json::to_vec(params.config()).map_err(|e| bad(e.to_string()))?;
    w.write_all(&(cfg.len() as u32).to_le_bytes())?;
    w.write_all(&cfg)?;
    w.write_all(&[F::BYTES as u8])?;
    w.write_all(&(params.tensors().len() as u32).to_le_bytes())?;
    for (name, t) in params.names().iter().zip(params.tensors()) {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.len() * F::BYTES);
        for &v in t.data() {
            if F::BYTES == 4 {
                buf.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
            } else {
                buf.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
            }
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>, ModelError> {
        let mut b = vec![0u8; n];
        self.inner
            .read_exact(&mut b)
            .map_err(|e| bad(format!("truncated checkpoint: {e}")))?;
        Ok(b)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }
}

/// Reads a checkpoint, converting stored values to `F` when the stored
/// width differs.
pub fn read_checkpoint<F: Float, R: Read>(r: R) -> Result<ModelParams<F>, ModelError> {
    let mut r = Reader { inner: r };
    if r.bytes(8)? != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let cfg_len = r.u32()? as usize;
    let config: ModelConfig =
        serde_json::from_slice(&r.bytes(cfg_len)?).map_err(|e| bad(format!("config: {e}")))?;
    let dtype = r.bytes(1)?[0] as usize;
    if dtype != 4 && dtype != 8 {
        return Err(bad(format!("unknown dtype width {dtype}")));
    }
    let count = r.u32()? as usize;
    let mut named = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let nl = r.u32()? as usize;
        let name = String::from_utf8(r.bytes(nl)?).map_err(|_| bad("tensor name is not UTF-8"))?;
        let rank = r.u32()? as usize;
        if rank == 0 || rank > 4 {
            return Err(bad(format!("tensor {name}: rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u64()? as usize);
        }
        let len = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let len = len.filter(|&l| l > 0 && l < (1 << 28)).ok_or_else(|| bad(format!("tensor {name}: bad dims {dims:?}")))?;
        let raw = r.bytes(len * dtype)?;
        let data: Vec<F> = raw
            .chunks_exact(dtype)
            .map(|c| {
                if dtype == 4 {
                    F::from_f64_lossy(f32::from_le_bytes(c.try_into().unwrap()) as f64)
                } else {
                    F::from_f64_lossy(f64::from_le_bytes(c.try_into().unwrap()))
                }
            })
            .collect();
        named.push((name, Tensor::new(dims, data)?));
    }
    let mut rest = Vec::new();
    r.inner.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(bad(format!("{} trailing bytes", rest.len())));
    }
    ModelParams::from_named(config, named)
}

pub fn save_checkpoint<F: Float>(params: &ModelParams<F>, path: impl AsRef<Path>) -> Result<(), ModelError> {
    let mut buf = Vec::new();
    write_checkpoint(params, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint<F: Float>(path: impl AsRef<Path>) -> Result<ModelParams<F>, ModelError> {
    let bytes = std::fs::read(path)?;
    read_checkpoint(bytes.as_slice())
}
