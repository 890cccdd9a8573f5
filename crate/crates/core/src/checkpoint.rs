//! Single-file checkpoint container.
//!
//! Layout (integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       8     magic "REGCKPT\0"
//! 8       4     format version (currently 1)
//! 12      8     meta length M
//! 20      M     meta JSON (config snapshot, counters, optimizer scalars)
//! 20+M    8     array count
//! ...           per array: u16 name length, name bytes, u8 dtype (2 = f64),
//!               u8 rank, u64 dims, f64 payload
//! ```
//!
//! Arrays hold every model parameter by name plus the optimizer moments
//! under `adam.m.<name>` / `adam.v.<name>`. Saving is deterministic
//! (sorted names, fixed JSON field order), so save -> load -> save is
//! byte-identical.

use crate::config::PipelineConfig;
use crate::params::{AdamW, ParamSet};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"REGCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

/// Optimizer scalars persisted alongside the moment arrays.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct AdamMeta {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step_count: u64,
}

/// JSON metadata block.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub config: PipelineConfig,
    /// Completed epochs.
    pub epoch: u64,
    /// Completed optimizer steps.
    pub step: u64,
    /// Base seed; together with the counters it reproduces every stream of
    /// training randomness (shuffles, crops, pools).
    pub base_seed: u64,
    pub adam: AdamMeta,
}

/// In-memory checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamSet,
    pub opt_m: BTreeMap<String, ArrayD<f64>>,
    pub opt_v: BTreeMap<String, ArrayD<f64>>,
}

impl Checkpoint {
    pub fn optimizer(&self) -> AdamW {
        AdamW {
            lr: self.meta.adam.lr,
            beta1: self.meta.adam.beta1,
            beta2: self.meta.adam.beta2,
            eps: self.meta.adam.eps,
            weight_decay: self.meta.adam.weight_decay,
            step_count: self.meta.adam.step_count,
            m: self.opt_m.clone(),
            v: self.opt_v.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        let meta = serde_json::to_vec(&self.meta).expect("meta serializes");
        w.write_all(&(meta.len() as u64).to_le_bytes())?;
        w.write_all(&meta)?;

        let mut arrays: Vec<(String, &ArrayD<f64>)> = Vec::new();
        for (k, v) in self.params.iter() {
            arrays.push((k.clone(), v));
        }
        for (k, v) in &self.opt_m {
            arrays.push((format!("adam.m.{k}"), v));
        }
        for (k, v) in &self.opt_v {
            arrays.push((format!("adam.v.{k}"), v));
        }
        arrays.sort_by(|a, b| a.0.cmp(&b.0));
        w.write_all(&(arrays.len() as u64).to_le_bytes())?;
        for (name, arr) in arrays {
            let nb = name.as_bytes();
            w.write_all(&(nb.len() as u16).to_le_bytes())?;
            w.write_all(nb)?;
            w.write_all(&[2u8, arr.ndim() as u8])?;
            for &d in arr.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in arr.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != FORMAT_VERSION {
            return Err(CheckpointError::BadVersion(version));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let meta_len = u64::from_le_bytes(b8) as usize;
        let mut meta_buf = vec![0u8; meta_len];
        r.read_exact(&mut meta_buf)?;
        let meta: CheckpointMeta = serde_json::from_slice(&meta_buf)
            .map_err(|e| CheckpointError::Corrupt(format!("meta: {e}")))?;

        r.read_exact(&mut b8)?;
        let count = u64::from_le_bytes(b8) as usize;
        let mut params = ParamSet::new();
        let mut opt_m = BTreeMap::new();
        let mut opt_v = BTreeMap::new();
        for _ in 0..count {
            let mut b2 = [0u8; 2];
            r.read_exact(&mut b2)?;
            let name_len = u16::from_le_bytes(b2) as usize;
            let mut nb = vec![0u8; name_len];
            r.read_exact(&mut nb)?;
            let name = String::from_utf8(nb)
                .map_err(|_| CheckpointError::Corrupt("array name".into()))?;
            let mut hdr = [0u8; 2];
            r.read_exact(&mut hdr)?;
            if hdr[0] != 2 {
                return Err(CheckpointError::Corrupt(format!(
                    "array {name}: dtype {}",
                    hdr[0]
                )));
            }
            let rank = hdr[1] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                r.read_exact(&mut b8)?;
                dims.push(u64::from_le_bytes(b8) as usize);
            }
            let n: usize = dims.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                r.read_exact(&mut b8)
                    .map_err(|_| CheckpointError::Corrupt(format!("array {name} truncated")))?;
                data.push(f64::from_le_bytes(b8));
            }
            let arr = ArrayD::from_shape_vec(IxDyn(&dims), data)
                .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
            if let Some(stripped) = name.strip_prefix("adam.m.") {
                opt_m.insert(stripped.to_string(), arr);
            } else if let Some(stripped) = name.strip_prefix("adam.v.") {
                opt_v.insert(stripped.to_string(), arr);
            } else {
                params.insert(&name, arr);
            }
        }
        Ok(Checkpoint {
            meta,
            params,
            opt_m,
            opt_v,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn fake_checkpoint() -> Checkpoint {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(3);
        let mut params = ParamSet::new();
        let mut opt_m = BTreeMap::new();
        let mut opt_v = BTreeMap::new();
        for name in ["opt.stem.conv.w", "sar.patch.b", "mefl.router.alpha"] {
            let arr = ArrayD::from_shape_fn(IxDyn(&[2, 3]), |_| rng.gen_range(-1.0..1.0));
            params.insert(name, arr.clone());
            opt_m.insert(name.to_string(), arr.mapv(|v| v * 0.1));
            opt_v.insert(name.to_string(), arr.mapv(|v| v * v));
        }
        Checkpoint {
            meta: CheckpointMeta {
                format_version: FORMAT_VERSION,
                config: PipelineConfig::tiny(),
                epoch: 2,
                step: 250,
                base_seed: 42,
                adam: AdamMeta {
                    lr: 5e-4,
                    beta1: 0.9,
                    beta2: 0.999,
                    eps: 1e-8,
                    weight_decay: 0.0,
                    step_count: 250,
                },
            },
            params,
            opt_m,
            opt_v,
        }
    }

    #[test]
    fn save_load_save_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let ck = fake_checkpoint();
        ck.save(&p1).unwrap();
        let loaded = Checkpoint::load(&p1).unwrap();
        loaded.save(&p2).unwrap();
        let b1 = std::fs::read(&p1).unwrap();
        let b2 = std::fs::read(&p2).unwrap();
        assert_eq!(b1, b2, "save -> load -> save must be byte-identical");

        assert_eq!(loaded.meta.epoch, 2);
        assert_eq!(loaded.meta.adam.step_count, 250);
        for (k, v) in ck.params.iter() {
            assert_eq!(loaded.params.get(k), v);
        }
        assert_eq!(loaded.opt_m, ck.opt_m);
        assert_eq!(loaded.opt_v, ck.opt_v);
    }

    #[test]
    fn rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("junk.ckpt");
        std::fs::write(&p, b"not a checkpoint at all").unwrap();
        assert!(matches!(
            Checkpoint::load(&p),
            Err(CheckpointError::BadMagic)
        ));
    }
}
