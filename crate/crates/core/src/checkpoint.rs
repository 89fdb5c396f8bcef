//! Versioned training checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "AFORGECK"
//! version  u32
//! meta     u64 length, then JSON (config, counters, tracker, optimizer
//!          scalars, rng state, pool records)
//! tensors  u64 count n, then n params, n first moments, n second moments,
//!          each as f64
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::centering::AverageTracker;
use crate::config::RunConfig;
use crate::error::CheckpointError;
use crate::pool::PoolRecord;
use crate::ppo::Adam;

pub const MAGIC: &[u8; 8] = b"AFORGECK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamScalars {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: RunConfig,
    pub seed: u64,
    pub n_actions: usize,
    pub env_steps: u64,
    pub tracker: AverageTracker,
    pub adam: AdamScalars,
    pub rng: ChaCha8Rng,
    pub pool: Vec<PoolRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: Vec<f64>,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
}

impl Checkpoint {
    pub fn adam(&self) -> Adam {
        let a = &self.meta.adam;
        Adam {
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            t: a.t,
            m: self.adam_m.clone(),
            v: self.adam_v.clone(),
        }
    }

    pub fn adam_scalars(adam: &Adam) -> AdamScalars {
        AdamScalars {
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            t: adam.t,
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), CheckpointError> {
        let n = self.params.len();
        if self.adam_m.len() != n || self.adam_v.len() != n {
            return Err(CheckpointError::Corrupt(
                "optimizer moments do not match parameters".into(),
            ));
        }
        let meta =
            serde_json::to_vec(&self.meta).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(meta.len() as u64).to_le_bytes())?;
        w.write_all(&meta)?;
        w.write_all(&(n as u64).to_le_bytes())?;
        for block in [&self.params, &self.adam_m, &self.adam_v] {
            for x in block.iter() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Checkpoint, CheckpointError> {
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(read_array(&mut r)?);
        if version != VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let meta_len = u64::from_le_bytes(read_array(&mut r)?);
        if meta_len > 1 << 30 {
            return Err(CheckpointError::Corrupt(format!(
                "metadata length {meta_len}"
            )));
        }
        let mut meta = vec![0u8; meta_len as usize];
        read_exact(&mut r, &mut meta)?;
        let meta: CheckpointMeta =
            serde_json::from_slice(&meta).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        let n = u64::from_le_bytes(read_array(&mut r)?);
        if n > 1 << 32 {
            return Err(CheckpointError::Corrupt(format!("parameter count {n}")));
        }
        let mut block = || -> Result<Vec<f64>, CheckpointError> {
            (0..n)
                .map(|_| Ok(f64::from_le_bytes(read_array(&mut r)?)))
                .collect()
        };
        let params = block()?;
        let adam_m = block()?;
        let adam_v = block()?;
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(CheckpointError::Corrupt("trailing bytes".into()));
        }
        Ok(Checkpoint {
            meta,
            params,
            adam_m,
            adam_v,
        })
    }

    /// Writes to a sibling temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let tmp = path.with_extension("tmp");
        self.write_to(BufWriter::new(File::create(&tmp)?))?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
        Checkpoint::read_from(BufReader::new(File::open(path)?))
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), CheckpointError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => CheckpointError::Corrupt("truncated".into()),
        _ => CheckpointError::Io(e),
    })
}

fn read_array<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N], CheckpointError> {
    let mut buf = [0u8; N];
    read_exact(r, &mut buf)?;
    Ok(buf)
}
