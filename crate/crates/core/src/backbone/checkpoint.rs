//! Little-endian checkpoint container.
//!
//! ```text
//! magic        8 bytes  "EDGEMIX\0"
//! version      u32
//! step         u64
//! config echo  u32 length + UTF-8 text (NetworkConfig::to_echo)
//! records      u32 count, then per record:
//!                u32 length + UTF-8 path, u32 rank, rank × u64 dims,
//!                product(dims) × f32 payload
//! ```
//!
//! Optimizer moments are stored as ordinary records under `adam.m.<path>` and
//! `adam.v.<path>`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{Adam, AdamConfig, EdgeNetwork, NetworkConfig, Trainer};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"EDGEMIX\0";
pub const CHECKPOINT_VERSION: u32 = 1;

const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_echo: String,
    pub step: u64,
    pub records: Vec<(String, Tensor<f32>)>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                Error::Checkpoint(format!(
                    "truncated file: wanted {n} bytes at offset {}",
                    self.pos
                ))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("invalid UTF-8 string".into()))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        let put_str = |out: &mut Vec<u8>, s: &str| {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        };
        put_str(&mut out, &self.config_echo);
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for (name, t) in &self.records {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8).ok() != Some(&CHECKPOINT_MAGIC[..]) {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let step = r.u64()?;
        let config_echo = r.string()?;
        let count = r.u32()? as usize;
        let mut records = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let dims = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("{name}: dimension overflow")))?;
            let raw = r.take(
                n.checked_mul(4)
                    .ok_or_else(|| Error::Checkpoint("payload overflow".into()))?,
            )?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            records.push((name, Tensor::new(dims, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            config_echo,
            step,
            records,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    fn find(&self, name: &str) -> Option<&Tensor<f32>> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

impl EdgeNetwork<f32> {
    pub fn to_checkpoint(&self, step: u64) -> Checkpoint {
        Checkpoint {
            config_echo: self.config.to_echo(),
            step,
            records: self
                .store
                .iter()
                .map(|(n, t)| (n.to_string(), t.clone()))
                .collect(),
        }
    }

    /// Rebuilds the network described by the config echo and fills in every
    /// parameter, checking names and shapes.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = NetworkConfig::from_echo(&ckpt.config_echo)
            .map_err(|e| Error::Checkpoint(format!("config echo: {e}")))?;
        let mut net = Self::build(config, 0)?;
        for (name, t) in &ckpt.records {
            if name.starts_with(ADAM_M) || name.starts_with(ADAM_V) {
                continue;
            }
            let id = net
                .store
                .find(name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter {name}")))?;
            net.store.set(id, t.clone()).map_err(|_| {
                Error::Checkpoint(format!(
                    "{name}: stored shape {:?} does not match config shape {:?}",
                    t.shape(),
                    net.store.get(id).shape()
                ))
            })?;
        }
        let missing = net.store.len()
            - ckpt
                .records
                .iter()
                .filter(|(n, _)| net.store.find(n).is_some())
                .count();
        if missing != 0 {
            return Err(Error::Checkpoint(format!("{missing} parameters missing")));
        }
        Ok(net)
    }

    pub fn save(&self, path: impl AsRef<Path>, step: u64) -> Result<()> {
        self.to_checkpoint(step).write(path)
    }

    /// Network and training step counter.
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, u64)> {
        let ckpt = Checkpoint::read(path)?;
        Ok((Self::from_checkpoint(&ckpt)?, ckpt.step))
    }

    /// Like [`EdgeNetwork::load`] but rejects checkpoints built for another config.
    pub fn load_expecting(path: impl AsRef<Path>, expected: &NetworkConfig) -> Result<(Self, u64)> {
        let (net, step) = Self::load(path)?;
        if net.config().to_echo() != expected.to_echo() {
            return Err(Error::Checkpoint(format!(
                "checkpoint config\n{}does not match expected\n{}",
                net.config().to_echo(),
                expected.to_echo()
            )));
        }
        Ok((net, step))
    }
}

impl Trainer<f32> {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = self.net.to_checkpoint(self.adam.t);
        for (i, (name, _)) in self.net.store.iter().enumerate() {
            ckpt.records
                .push((format!("{ADAM_M}{name}"), self.adam.m[i].clone()));
            ckpt.records
                .push((format!("{ADAM_V}{name}"), self.adam.v[i].clone()));
        }
        ckpt
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().write(path)
    }

    /// Continues from a checkpoint; moments restart at zero if it holds none.
    pub fn resume(path: impl AsRef<Path>, config: AdamConfig) -> Result<Self> {
        let ckpt = Checkpoint::read(path)?;
        let net = EdgeNetwork::from_checkpoint(&ckpt)?;
        let mut adam = Adam::new(config, &net.store);
        adam.t = ckpt.step;
        for (i, (name, t)) in net.store.iter().enumerate() {
            for (prefix, slot) in [(ADAM_M, &mut adam.m[i]), (ADAM_V, &mut adam.v[i])] {
                if let Some(saved) = ckpt.find(&format!("{prefix}{name}")) {
                    if saved.shape() != t.shape() {
                        return Err(Error::Checkpoint(format!("{prefix}{name}: shape mismatch")));
                    }
                    *slot = saved.clone();
                }
            }
        }
        Ok(Self { net, adam })
    }
}
