//! `NFTC` checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "NFTC"
//! 4       1     version (1)
//! 5       1     transform mode tag (0 const-shift, 1 vec-shift, 2 scale-shift, 3 mlp)
//! 6       1     flags (bit 0: shared meta-net)
//! 7       1     reserved, 0
//! 8       4     dim (u32)
//! 12      4     hidden (u32)
//! 16      8     parameter count P (u64)
//! 24      8*P   parameters as f64, canonical order of `Params::views`
//! ..      4     metadata length L (u32)
//! ..      L     metadata, UTF-8 JSON
//! ```
//!
//! The file must end exactly after the metadata.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelState, TransformMode};
use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

pub const MAGIC: &[u8; 4] = b"NFTC";
const VERSION: u8 = 1;
const HEADER_LEN: usize = 24;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: TrainConfig,
    pub seed: u64,
    /// SHA-256 of the loss-trace CSV, hex encoded. Empty for untrained models.
    pub trace_digest: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelState,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    /// Wraps a model that was not produced by a training run.
    pub fn untrained(model: ModelState) -> Self {
        Checkpoint {
            model,
            meta: CheckpointMeta {
                config: TrainConfig::default(),
                seed: 0,
                trace_digest: String::new(),
            },
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let m = &self.model;
        let flat = m.params.flatten();
        let meta = serde_json::to_vec(&self.meta).expect("metadata serializes");
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * flat.len() + 4 + meta.len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(m.mode.tag());
        out.push(u8::from(m.shared_net));
        out.push(0);
        out.extend_from_slice(&(m.dim() as u32).to_le_bytes());
        out.extend_from_slice(&(m.hidden() as u32).to_le_bytes());
        out.extend_from_slice(&(flat.len() as u64).to_le_bytes());
        for x in &flat {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let fmt = |msg: &str| Error::Format(format!("checkpoint: {msg}"));
        if bytes.len() < HEADER_LEN {
            return Err(fmt("truncated header"));
        }
        if &bytes[0..4] != MAGIC {
            return Err(fmt("bad magic"));
        }
        if bytes[4] != VERSION {
            return Err(fmt(&format!("unsupported version {}", bytes[4])));
        }
        let mode = TransformMode::from_tag(bytes[5]).ok_or_else(|| fmt("unknown transform mode"))?;
        if bytes[6] > 1 || bytes[7] != 0 {
            return Err(fmt("bad flags"));
        }
        let shared_net = bytes[6] == 1;
        let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let hidden = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(bytes[16..24].try_into().unwrap());

        let expected = param_count(dim, hidden);
        if count != expected {
            return Err(fmt(&format!("parameter count {count} does not match {expected}")));
        }
        if (bytes.len() as u64 - HEADER_LEN as u64) / 8 < count {
            return Err(fmt("truncated payload"));
        }
        let mut model = ModelState::init(dim, hidden, mode, 0)
            .map_err(|e| fmt(&format!("bad dimensions: {e}")))?
            .with_shared_net(shared_net);
        let expected = model.params.num_scalars();
        let payload_end = HEADER_LEN + 8 * expected;
        if bytes.len() < payload_end + 4 {
            return Err(fmt("truncated payload"));
        }
        let flat: Vec<f64> = bytes[HEADER_LEN..payload_end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if flat.iter().any(|x| !x.is_finite()) {
            return Err(fmt("non-finite parameter"));
        }
        model.params.assign_flat(&flat)?;
        let meta_len =
            u32::from_le_bytes(bytes[payload_end..payload_end + 4].try_into().unwrap()) as usize;
        let meta_start = payload_end + 4;
        if bytes.len() != meta_start + meta_len {
            return Err(fmt("length does not match metadata size"));
        }
        let meta: CheckpointMeta = serde_json::from_slice(&bytes[meta_start..])
            .map_err(|e| fmt(&format!("metadata: {e}")))?;
        Ok(Checkpoint { model, meta })
    }

    /// Fails with `DimMismatch` if the model cannot be applied to `dim`-wide features.
    pub fn check_dim(&self, dim: usize) -> Result<()> {
        if self.model.dim() != dim {
            return Err(Error::DimMismatch {
                expected: self.model.dim(),
                got: dim,
            });
        }
        Ok(())
    }
}

/// Scalar count of a parameter set: two heads, two meta-nets and two MLPs.
fn param_count(dim: usize, hidden: usize) -> u64 {
    let (d, h) = (dim as u64, hidden as u64);
    let head = 2 * d + 1;
    let net = h * d + h + 2 * (d * h + d);
    let mlp = h * d + h + d * h + d;
    2 * (head + net + mlp)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, ckpt.encode())?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::decode(&fs::read(path)?)
}
