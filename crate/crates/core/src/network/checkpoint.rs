//! Versioned binary snapshot of a network and its optimizer state.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic "RKSCKPT\0" | version u32 | shape-json length u32 | shape json
//! seed u64 | epoch u64 | initial loss f64 (NaN when unknown)
//! n u64 | n × f64 parameters, declaration order
//! n u64 | n × f64 running statistics
//! n u64 | n × f64 momentum buffer (empty when absent)
//! crc32 u32 of every preceding byte
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{HoNetwork, NetworkShape};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"RKSCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub shape: NetworkShape,
    pub seed: u64,
    /// Number of completed epochs.
    pub epoch: u64,
    /// Reference loss for the divergence rule, when training has started.
    pub initial_loss: Option<f64>,
    pub params: Vec<f64>,
    pub running_stats: Vec<f64>,
    pub velocity: Vec<f64>,
}

#[derive(Serialize)]
struct Sidecar<'a> {
    version: u32,
    shape: &'a NetworkShape,
    seed: u64,
    epoch: u64,
    parameters: usize,
    crc32: u32,
    parameter_names: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    train_config: Option<&'a serde_json::Value>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!(
                "checkpoint truncated at byte {}",
                self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        let raw = self.take(n.checked_mul(8).ok_or_else(|| {
            Error::Format("checkpoint buffer length overflows".into())
        })?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn capture(
        net: &HoNetwork,
        epoch: u64,
        initial_loss: Option<f64>,
        velocity: &[f64],
    ) -> Self {
        Checkpoint {
            shape: net.shape.clone(),
            seed: net.seed,
            epoch,
            initial_loss,
            params: net.store.flatten(),
            running_stats: net.running_stats(),
            velocity: velocity.to_vec(),
        }
    }

    /// Rebuilds the network from its shape and seed, then overwrites every
    /// parameter and running statistic.
    pub fn restore(&self) -> Result<HoNetwork> {
        let mut net = HoNetwork::build(&self.shape, self.seed)?;
        net.store.load_flat(&self.params)?;
        net.load_running_stats(&self.running_stats)?;
        Ok(net)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let shape = serde_json::to_vec(&self.shape)?;
        let mut out = Vec::with_capacity(64 + shape.len() + 8 * self.params.len() * 2);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        out.extend_from_slice(&shape);
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.initial_loss.unwrap_or(f64::NAN).to_le_bytes());
        put_f64s(&mut out, &self.params);
        put_f64s(&mut out, &self.running_stats);
        put_f64s(&mut out, &self.velocity);
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(Error::Format(format!(
                "checkpoint checksum mismatch: stored {stored:08x}, computed {actual:08x}"
            )));
        }
        let mut r = Reader {
            bytes: body,
            pos: MAGIC.len(),
        };
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})"
            )));
        }
        let shape_len = r.u32()? as usize;
        let shape = serde_json::from_slice(r.take(shape_len)?)?;
        let seed = r.u64()?;
        let epoch = r.u64()?;
        let initial_loss = Some(r.f64()?).filter(|v| !v.is_nan());
        let params = r.f64s()?;
        let running_stats = r.f64s()?;
        let velocity = r.f64s()?;
        if r.pos != body.len() {
            return Err(Error::Format("trailing bytes in checkpoint".into()));
        }
        Ok(Checkpoint {
            shape,
            seed,
            epoch,
            initial_loss,
            params,
            running_stats,
            velocity,
        })
    }

    pub fn sidecar_path(path: &Path) -> PathBuf {
        path.with_extension("json")
    }

    /// Writes the binary file and its JSON sidecar next to it.
    pub fn save(
        &self,
        path: &Path,
        net: &HoNetwork,
        train_config: Option<&serde_json::Value>,
    ) -> Result<()> {
        let bytes = self.to_bytes()?;
        let crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
        fs::write(path, &bytes)?;
        let sidecar = Sidecar {
            version: CHECKPOINT_VERSION,
            shape: &self.shape,
            seed: self.seed,
            epoch: self.epoch,
            parameters: self.params.len(),
            crc32: crc,
            parameter_names: net.store.iter().map(|(_, p)| p.name.clone()).collect(),
            train_config,
        };
        fs::write(
            Self::sidecar_path(path),
            serde_json::to_string_pretty(&sidecar)?,
        )?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
