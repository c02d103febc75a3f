//! Binary checkpoints, little-endian throughout.
//!
//! ```text
//! "LFSB"  u32 version  u32 count
//! count × { u32 name_len  name (UTF-8)  u32 rank  u32 dims[rank]  f32 values[prod(dims)] }
//! u64 step  u64 seed
//! ```
//!
//! The model configuration travels in a JSON sidecar next to the file
//! (`<name>.json`) so a checkpoint can be loaded without other input.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use lfsamba::model::{ModelConfig, ModelParams};
use lfsamba::params::ModuleExt;
use lfsamba::{Scalar, Tensor};

use crate::error::{DataError, Result};

pub const MAGIC: &[u8; 4] = b"LFSB";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint<S: Scalar> {
    pub tensors: BTreeMap<String, Tensor<S>>,
    pub step: u64,
    pub seed: u64,
}

pub fn encode_checkpoint<S: Scalar>(tensors: &[(String, Tensor<S>)], step: u64, seed: u64) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.as_f32().to_le_bytes());
        }
    }
    out.extend_from_slice(&step.to_le_bytes());
    out.extend_from_slice(&seed.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            DataError::Corrupt(format!("truncated at byte {} while reading {what}", self.pos))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_checkpoint<S: Scalar>(bytes: &[u8]) -> Result<Checkpoint<S>> {
    let r = &mut Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic").map_err(|_| DataError::Format("file shorter than the magic".into()))?;
    if magic != MAGIC {
        return Err(DataError::Format(format!("bad magic {:?}", String::from_utf8_lossy(magic))));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(DataError::Version { found: version, expected: VERSION });
    }
    let count = r.u32("tensor count")?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| DataError::Corrupt("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(r.u32("dims")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| DataError::Corrupt(format!("{name}: shape {shape:?} overflows")))?;
        let raw = r.take(n, &name)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| S::lit(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| DataError::Corrupt(format!("{name}: {e}")))?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(DataError::Corrupt(format!("duplicate tensor {name}")));
        }
    }
    let step = r.u64("step")?;
    let seed = r.u64("seed")?;
    if r.pos != bytes.len() {
        return Err(DataError::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint { tensors, step, seed })
}

pub fn write_checkpoint<S: Scalar>(path: &Path, tensors: &[(String, Tensor<S>)], step: u64, seed: u64) -> Result<()> {
    fs::write(path, encode_checkpoint(tensors, step, seed)).map_err(|e| DataError::io(path, e))
}

pub fn read_checkpoint<S: Scalar>(path: &Path) -> Result<Checkpoint<S>> {
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Copies the checkpoint's tensors into `params`, requiring every name and
/// shape to match.
pub fn restore<S: Scalar>(params: &mut ModelParams<S>, ckpt: &Checkpoint<S>) -> Result<()> {
    for (name, t) in params.named_tensors() {
        let src = ckpt.tensors.get(&name).ok_or_else(|| DataError::MissingTensor(name.clone()))?;
        if src.shape() != t.shape() {
            return Err(DataError::Dimension(format!(
                "tensor {name} has shape {:?} in the checkpoint, expected {:?}",
                src.shape(),
                t.shape()
            )));
        }
    }
    params.load_named(&ckpt.tensors)?;
    Ok(())
}

pub fn config_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes the checkpoint and its configuration sidecar.
pub fn save_model<S: Scalar>(path: &Path, params: &ModelParams<S>, step: u64, seed: u64) -> Result<()> {
    let cfg_path = config_path(path);
    let json = serde_json::to_string_pretty(&params.config)
        .map_err(|source| DataError::Json { path: cfg_path.clone(), source })?;
    fs::write(&cfg_path, json + "\n").map_err(|e| DataError::io(&cfg_path, e))?;
    write_checkpoint(path, &params.named_tensors(), step, seed)
}

/// Reads the sidecar configuration, rebuilds the model and restores it.
pub fn load_model<S: Scalar>(path: &Path) -> Result<(ModelParams<S>, Checkpoint<S>)> {
    let cfg_path = config_path(path);
    let text = fs::read_to_string(&cfg_path).map_err(|e| DataError::io(&cfg_path, e))?;
    let cfg: ModelConfig =
        serde_json::from_str(&text).map_err(|source| DataError::Json { path: cfg_path.clone(), source })?;
    let ckpt = read_checkpoint(path)?;
    let mut params = ModelParams::init(&cfg)?;
    restore(&mut params, &ckpt)?;
    Ok((params, ckpt))
}
