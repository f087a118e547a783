//! Checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"ARDN"          4 bytes
//! version u32              currently 1
//! hlen    u64              header length in bytes
//! header  JSON             CheckpointHeader
//! count   u64              number of f64 parameters
//! params  f64 * count      flat parameter vector
//! ```
//!
//! The header stores the model configuration, the noise-schedule recipe, the
//! training timestep plan, the full vocabulary token list, and an FNV-1a
//! vocabulary hash for mismatch detection.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{Denoiser, ModelConfig};
use crate::schedule::{NoiseSchedule, TimestepPlan};

const MAGIC: &[u8; 4] = b"ARDN";
const VERSION: u32 = 1;

/// Square-root schedule recipe; enough to rebuild the coefficient tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub total_steps: usize,
    pub offset: f64,
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::sqrt(self.total_steps, self.offset)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub schedule: ScheduleSpec,
    pub plan: TimestepPlan,
    pub vocab: Vec<String>,
    pub vocab_hash: u64,
    pub train_seed: u64,
    pub train_step: usize,
}

/// A loaded checkpoint: the denoiser plus everything needed to run inference.
pub struct Checkpoint {
    pub model: Denoiser,
    pub schedule: NoiseSchedule,
    pub plan: TimestepPlan,
    pub vocab: Vocabulary,
    pub header: CheckpointHeader,
}

pub fn save(
    path: &Path,
    model: &Denoiser,
    schedule_spec: &ScheduleSpec,
    plan: &TimestepPlan,
    vocab: &Vocabulary,
    train_seed: u64,
    train_step: usize,
) -> Result<()> {
    let header = CheckpointHeader {
        model: model.config().clone(),
        schedule: schedule_spec.clone(),
        plan: plan.clone(),
        vocab: vocab.tokens().to_vec(),
        vocab_hash: vocab.hash(),
        train_seed,
        train_step,
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| Error::Data(format!("checkpoint header serialization: {e}")))?;
    let params = model.params().flat();

    let mut file = std::fs::File::create(path)?;
    file.write_all(MAGIC)?;
    file.write_all(&VERSION.to_le_bytes())?;
    file.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    file.write_all(&header_bytes)?;
    file.write_all(&(params.len() as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(params.len() * 8);
    for &p in params {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    file.write_all(&buf)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut file = std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open checkpoint {path:?}: {e}")))?;
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)
        .map_err(|e| Error::Data(format!("truncated checkpoint: {e}")))?;
    if &magic != MAGIC {
        return Err(Error::Data(format!("{path:?} is not a checkpoint file")));
    }
    let mut u32buf = [0u8; 4];
    file.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        return Err(Error::Data(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let mut u64buf = [0u8; 8];
    file.read_exact(&mut u64buf)?;
    let hlen = u64::from_le_bytes(u64buf) as usize;
    let mut header_bytes = vec![0u8; hlen];
    file.read_exact(&mut header_bytes)?;
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Data(format!("corrupt checkpoint header: {e}")))?;
    file.read_exact(&mut u64buf)?;
    let count = u64::from_le_bytes(u64buf) as usize;
    let mut blob = vec![0u8; count * 8];
    file.read_exact(&mut blob)
        .map_err(|e| Error::Data(format!("truncated parameter blob: {e}")))?;
    let params: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let vocab = Vocabulary::from_token_list(&header.vocab)?;
    if vocab.hash() != header.vocab_hash {
        return Err(Error::Data("checkpoint vocabulary hash mismatch".into()));
    }
    let mut model = Denoiser::new(header.model.clone(), 0)?;
    model.params_mut().set_flat(&params)?;
    let schedule = header.schedule.build()?;
    Ok(Checkpoint {
        model,
        schedule,
        plan: header.plan.clone(),
        vocab,
        header,
    })
}
