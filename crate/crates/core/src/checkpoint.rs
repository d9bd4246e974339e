//! Binary checkpoint format.
//!
//! ```text
//! magic     8 bytes  "GRIDRLCK"
//! version   u32 LE
//! meta      u32 LE length + JSON (model config, dims, env config, variant, network hash)
//! tensors   u32 LE count, then per tensor:
//!           u32 name length + UTF-8 name, u32 rows, u32 cols,
//!           rows*cols f64 LE in column-major order
//! trainer   u8 flag; when 1: u32 length + JSON state, then the Adam first
//!           and second moments as two tensor blocks
//! ```

use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Matrix;
use crate::env::{EnvConfig, Variant};
use crate::policy::{GcapcnConfig, ParamStore, Policy, PolicyDims, PolicyError};
use crate::ppo::{Adam, TrainerState};

pub const MAGIC: &[u8; 8] = b"GRIDRLCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file")]
    BadMagic,
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint does not match: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: GcapcnConfig,
    pub dims: PolicyDims,
    pub env: EnvConfig,
    pub variant: Variant,
    pub network_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerBlock {
    pub state: TrainerState,
    pub adam_m: Vec<Matrix>,
    pub adam_v: Vec<Matrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore,
    pub trainer: Option<TrainerBlock>,
}

impl Checkpoint {
    pub fn policy(&self) -> Result<Policy, CheckpointError> {
        Ok(Policy::from_params(
            self.meta.model.clone(),
            self.meta.dims,
            self.params.clone(),
        )?)
    }

    /// Rebuilds the optimizer, checking moment shapes against the params.
    pub fn adam(&self) -> Result<Option<Adam>, CheckpointError> {
        let Some(tb) = &self.trainer else {
            return Ok(None);
        };
        let mut adam = Adam::new(tb.state.config.lr, &self.params);
        for (i, (m, v)) in tb.adam_m.iter().zip(&tb.adam_v).enumerate() {
            if i >= adam.m.len() || m.shape() != adam.m[i].shape() || v.shape() != adam.v[i].shape()
            {
                return Err(CheckpointError::Corrupt(
                    "optimizer moments do not match parameters".into(),
                ));
            }
        }
        if tb.adam_m.len() != adam.m.len() || tb.adam_v.len() != adam.v.len() {
            return Err(CheckpointError::Corrupt("optimizer moment count".into()));
        }
        adam.m = tb.adam_m.clone();
        adam.v = tb.adam_v.clone();
        adam.t = tb.state.adam_t;
        Ok(Some(adam))
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<(), CheckpointError> {
        w.write_all(MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        write_json(w, &self.meta)?;
        let named: Vec<(&str, &Matrix)> = self.params.iter().collect();
        write_tensors(w, &named)?;
        match &self.trainer {
            None => w.write_all(&[0])?,
            Some(tb) => {
                w.write_all(&[1])?;
                write_json(w, &tb.state)?;
                let m: Vec<(&str, &Matrix)> = tb.adam_m.iter().map(|x| ("m", x)).collect();
                let v: Vec<(&str, &Matrix)> = tb.adam_v.iter().map(|x| ("v", x)).collect();
                write_tensors(w, &m)?;
                write_tensors(w, &v)?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to memory");
        out
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| CheckpointError::BadMagic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let meta: CheckpointMeta = read_json(r)?;
        let mut params = ParamStore::new();
        for (name, m) in read_tensors(r)? {
            params.insert(name, m);
        }
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let trainer = match flag[0] {
            0 => None,
            1 => {
                let state: TrainerState = read_json(r)?;
                let adam_m = read_tensors(r)?.into_iter().map(|(_, m)| m).collect();
                let adam_v = read_tensors(r)?.into_iter().map(|(_, m)| m).collect();
                Some(TrainerBlock {
                    state,
                    adam_m,
                    adam_v,
                })
            }
            f => return Err(CheckpointError::Corrupt(format!("trainer flag {f}"))),
        };
        Ok(Self {
            meta,
            params,
            trainer,
        })
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self, CheckpointError> {
        Self::read_from(&mut bytes)
    }
}

fn write_json(w: &mut impl Write, value: &impl Serialize) -> Result<(), CheckpointError> {
    let bytes = serde_json::to_vec(value).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    w.write_all(&(bytes.len() as u32).to_le_bytes())?;
    w.write_all(&bytes)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(r: &mut impl Read) -> Result<T, CheckpointError> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    serde_json::from_slice(&buf).map_err(|e| CheckpointError::Corrupt(e.to_string()))
}

fn read_u32(r: &mut impl Read) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn write_tensors(w: &mut impl Write, tensors: &[(&str, &Matrix)]) -> Result<(), CheckpointError> {
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, m) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(m.nrows() as u32).to_le_bytes())?;
        w.write_all(&(m.ncols() as u32).to_le_bytes())?;
        for x in m.iter() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_tensors(r: &mut impl Read) -> Result<Vec<(String, Matrix)>, CheckpointError> {
    let count = read_u32(r)? as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = read_u32(r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name =
            String::from_utf8(name).map_err(|_| CheckpointError::Corrupt("tensor name".into()))?;
        let rows = read_u32(r)? as usize;
        let cols = read_u32(r)? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        let mut b = [0u8; 8];
        for _ in 0..rows * cols {
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        out.push((name, Matrix::from_vec(rows, cols, data)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn sample() -> Checkpoint {
        let dims = PolicyDims {
            nodes: 5,
            lines: 4,
            actions: 3,
        };
        let cfg = GcapcnConfig {
            embed_dim: 4,
            hidden: vec![3],
            ..Default::default()
        };
        let p = Policy::new(cfg.clone(), dims, &mut rng::stream(1, "policy-init")).unwrap();
        Checkpoint {
            meta: CheckpointMeta {
                model: cfg,
                dims,
                env: EnvConfig::default(),
                variant: Variant::Ph,
                network_hash: "abc".into(),
            },
            params: p.params,
            trainer: None,
        }
    }

    #[test]
    fn round_trip_exact() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), c.to_bytes());
    }

    #[test]
    fn version_and_magic_checked() {
        let mut bytes = sample().to_bytes();
        bytes[8] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(CheckpointError::Version { found: 9, .. })
        ));
        bytes[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(CheckpointError::BadMagic)
        ));
    }

    #[test]
    fn truncated_file_fails() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 5]).is_err());
    }
}
