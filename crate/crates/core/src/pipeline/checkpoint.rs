//! Resumable stage state: `CTXS`, u32 header length, JSON header, then the
//! parameters and both optimizer moments as little-endian f64.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::util::atomic_write;

const MAGIC: &[u8; 4] = b"CTXS";

#[derive(Debug, Clone, PartialEq)]
pub struct StageCheckpoint {
    pub stage: String,
    /// Number of completed steps.
    pub step: usize,
    pub config_hash: String,
    pub params: Vec<f64>,
    pub optimizer: Adam,
}

#[derive(Serialize, Deserialize)]
struct Header {
    stage: String,
    step: usize,
    config_hash: String,
    lr: f64,
    optimizer_step: u64,
    len: usize,
}

impl StageCheckpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::to_vec(&Header {
            stage: self.stage.clone(),
            step: self.step,
            config_hash: self.config_hash.clone(),
            lr: self.optimizer.lr,
            optimizer_step: self.optimizer.step,
            len: self.params.len(),
        })?;
        let (m, v) = self.optimizer.moments();
        let mut bytes = Vec::with_capacity(8 + header.len() + 24 * self.params.len());
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&(header.len() as u32).to_le_bytes());
        bytes.extend_from_slice(&header);
        for block in [&self.params[..], m, v] {
            for x in block {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        atomic_write(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let bad = |detail: &str| Error::Format {
            path: path.to_path_buf(),
            detail: detail.to_string(),
        };
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(bad("missing CTXS magic"));
        }
        let hend = 8 + u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        if bytes.len() < hend {
            return Err(bad("truncated header"));
        }
        let h: Header = serde_json::from_slice(&bytes[8..hend])?;
        let body = &bytes[hend..];
        if body.len() != 24 * h.len {
            return Err(bad("state block length mismatch"));
        }
        let mut blocks = body
            .chunks_exact(8 * h.len.max(1))
            .map(|c| c.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect::<Vec<f64>>());
        let (params, m, v) = if h.len == 0 {
            (Vec::new(), Vec::new(), Vec::new())
        } else {
            (blocks.next().unwrap(), blocks.next().unwrap(), blocks.next().unwrap())
        };
        Ok(Self {
            stage: h.stage,
            step: h.step,
            config_hash: h.config_hash,
            params,
            optimizer: Adam::from_state(h.lr, h.optimizer_step, m, v)?,
        })
    }

    pub fn check(&self, stage: &str, config_hash: &str) -> Result<()> {
        if self.stage != stage {
            return Err(Error::Config(format!("checkpoint is for stage `{}`, not `{stage}`", self.stage)));
        }
        if self.config_hash != config_hash {
            return Err(Error::ConfigHashMismatch {
                expected: config_hash.to_string(),
                found: self.config_hash.clone(),
            });
        }
        Ok(())
    }
}
