//! Versioned, checksummed training snapshots.
//!
//! A checkpoint carries everything needed to continue a run bit-exactly:
//! the stage and step, the resolved config text, the training stream's
//! position, all named parameter tensors, both optimizer moment sets,
//! and (during distillation) the frozen teacher weights. The payload is
//! little-endian with explicit names and shapes, and a SHA-256 trailer
//! guards the whole file.

use crate::config::Stage;
use crate::error::{CoreError, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;
use sha2::{Digest, Sha256};
use std::path::Path;

const MAGIC: &[u8; 4] = b"VSCP";
const VERSION: u32 = 1;
const TRAILER: usize = 32;

#[derive(Clone)]
pub struct Checkpoint {
    pub stage: Stage,
    /// Optimizer steps completed in this stage.
    pub step: u64,
    /// Canonical config echo of the run that wrote the snapshot.
    pub config_text: String,
    pub seed: u64,
    /// Training-stream position; restores the batch sequence.
    pub word_pos: u128,
    pub params: ParamSet,
    pub opt_m: ParamSet,
    pub opt_v: ParamSet,
    /// Frozen conversion model for the distillation stage.
    pub teacher: Option<ParamSet>,
}

fn stage_code(s: Stage) -> u8 {
    match s {
        Stage::Pretrain => 0,
        Stage::SelfDistill => 1,
        Stage::Align => 2,
    }
}

fn stage_from(code: u8) -> Result<Stage> {
    match code {
        0 => Ok(Stage::Pretrain),
        1 => Ok(Stage::SelfDistill),
        2 => Ok(Stage::Align),
        other => Err(CoreError::Format(format!("unknown stage code {other}"))),
    }
}

fn write_set(buf: &mut Vec<u8>, set: &ParamSet) {
    buf.extend_from_slice(&(set.len() as u32).to_le_bytes());
    for (name, t) in set.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(CoreError::Truncated {
                expected: self.pos + n,
                actual: self.bytes.len(),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }
}

fn read_set(c: &mut Cursor) -> Result<ParamSet> {
    let count = c.u32()? as usize;
    let mut set = ParamSet::new();
    for _ in 0..count {
        let name_len = c.u32()? as usize;
        let name = String::from_utf8(c.take(name_len)?.to_vec())
            .map_err(|_| CoreError::Format("tensor name is not valid utf-8".into()))?;
        let ndim = c.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(c.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(f64::from_le_bytes(c.take(8)?.try_into().unwrap()));
        }
        set.insert(name, Tensor::from_vec(shape, data)?)?;
    }
    Ok(set)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.push(stage_code(self.stage));
        buf.extend_from_slice(&self.step.to_le_bytes());
        buf.extend_from_slice(&self.seed.to_le_bytes());
        buf.extend_from_slice(&self.word_pos.to_le_bytes());
        buf.extend_from_slice(&(self.config_text.len() as u32).to_le_bytes());
        buf.extend_from_slice(self.config_text.as_bytes());
        buf.push(u8::from(self.teacher.is_some()));
        write_set(&mut buf, &self.params);
        write_set(&mut buf, &self.opt_m);
        write_set(&mut buf, &self.opt_v);
        if let Some(teacher) = &self.teacher {
            write_set(&mut buf, teacher);
        }
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        if bytes.len() < 8 {
            return Err(CoreError::Truncated {
                expected: 8,
                actual: bytes.len(),
            });
        }
        if &bytes[..4] != MAGIC {
            return Err(CoreError::Format(
                "not a checkpoint file (bad magic)".into(),
            ));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(CoreError::UnsupportedVersion {
                found: version,
                supported: VERSION,
            });
        }
        if bytes.len() < 8 + TRAILER {
            return Err(CoreError::Truncated {
                expected: 8 + TRAILER,
                actual: bytes.len(),
            });
        }
        let (payload, trailer) = bytes.split_at(bytes.len() - TRAILER);
        let digest = Sha256::digest(payload);
        if digest.as_slice() != trailer {
            return Err(CoreError::Integrity(
                "checkpoint checksum does not match payload".into(),
            ));
        }

        let mut c = Cursor {
            bytes: payload,
            pos: 8,
        };
        let stage = stage_from(c.u8()?)?;
        let step = c.u64()?;
        let seed = c.u64()?;
        let word_pos = c.u128()?;
        let config_len = c.u32()? as usize;
        let config_text = String::from_utf8(c.take(config_len)?.to_vec())
            .map_err(|_| CoreError::Format("config snapshot is not valid utf-8".into()))?;
        let has_teacher = c.u8()?;
        let params = read_set(&mut c)?;
        let opt_m = read_set(&mut c)?;
        let opt_v = read_set(&mut c)?;
        let teacher = match has_teacher {
            0 => None,
            1 => Some(read_set(&mut c)?),
            other => {
                return Err(CoreError::Format(format!(
                    "teacher flag must be 0 or 1, got {other}"
                )))
            }
        };
        if c.pos != payload.len() {
            return Err(CoreError::Format(format!(
                "{} trailing bytes after checkpoint payload",
                payload.len() - c.pos
            )));
        }
        Ok(Checkpoint {
            stage,
            step,
            config_text,
            seed,
            word_pos,
            params,
            opt_m,
            opt_v,
            teacher,
        })
    }
}

pub fn save_checkpoint(c: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, c.to_bytes()).map_err(|e| CoreError::Io(format!("{}: {e}", path.display())))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes =
        std::fs::read(path).map_err(|e| CoreError::Io(format!("{}: {e}", path.display())))?;
    Checkpoint::from_bytes(&bytes)
}
