//! Checkpoints: a version-tagged header, a checksum line, and one JSON
//! payload holding both parameter sets, optimizer moments, queue contents,
//! counters, and random-stream positions. Serialization is deterministic,
//! so save, load, save produces byte-identical files.

use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::objectives::QueueSnapshot;
use crate::params::ParamSnapshot;
use crate::trainer::{AdamSnapshot, Result, TrainConfig, TrainError};
use crate::Scalar;

const CKPT_MAGIC: &str = "DUETCKPT";
pub const CKPT_VERSION: u32 = 1;

/// A ChaCha stream frozen mid-sequence: its seed plus the 128-bit word
/// position, split into two 64-bit halves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_hi: u64,
    pub word_lo: u64,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        let pos = rng.get_word_pos();
        Self {
            seed: rng.get_seed(),
            word_hi: (pos >> 64) as u64,
            word_lo: pos as u64,
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_word_pos(((self.word_hi as u128) << 64) | self.word_lo as u128);
        rng
    }
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub query: Vec<ParamSnapshot>,
    pub key: Vec<ParamSnapshot>,
    pub adam: AdamSnapshot,
    pub queue: QueueSnapshot,
    pub momentum: Scalar,
    pub global_step: u64,
    /// Next epoch to run (0-based).
    pub epoch: usize,
    /// Steps already completed inside that epoch.
    pub step_in_epoch: usize,
    pub mask_rng: RngState,
    pub drop_rng: RngState,
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let payload = serde_json::to_string(ckpt)
        .map_err(|e| TrainError::Integrity(format!("cannot encode checkpoint: {e}")))?;
    let digest = hex::encode(Sha256::digest(payload.as_bytes()));
    let text = format!("{CKPT_MAGIC} {CKPT_VERSION}\nsha256 {digest}\n{payload}\n");
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.splitn(3, '\n');
    let header = lines.next().unwrap_or("");
    let mut header_parts = header.split_whitespace();
    if header_parts.next() != Some(CKPT_MAGIC) {
        return Err(TrainError::Incompatible(format!(
            "{} does not start with the {CKPT_MAGIC} header",
            path.display()
        )));
    }
    let version: u32 = header_parts
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| TrainError::Incompatible("unreadable version tag".into()))?;
    if version != CKPT_VERSION {
        return Err(TrainError::Incompatible(format!(
            "checkpoint version {version}, this build reads {CKPT_VERSION}"
        )));
    }
    let checksum_line = lines
        .next()
        .ok_or_else(|| TrainError::Integrity("missing checksum line".into()))?;
    let declared = checksum_line
        .strip_prefix("sha256 ")
        .ok_or_else(|| TrainError::Integrity("malformed checksum line".into()))?;
    let payload = lines
        .next()
        .ok_or_else(|| TrainError::Integrity("missing payload".into()))?
        .trim_end_matches('\n');
    let actual = hex::encode(Sha256::digest(payload.as_bytes()));
    if actual != declared {
        return Err(TrainError::Integrity(
            "payload does not match its checksum".into(),
        ));
    }
    serde_json::from_str(payload)
        .map_err(|e| TrainError::Integrity(format!("payload does not decode: {e}")))
}
