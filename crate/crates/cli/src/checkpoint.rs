//! Named-array binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"DAILCKPT" | version: u8 | meta_len: u32 | meta: UTF-8 JSON
//! count: u32 | count × (name_len: u32 | name | ndim: u32 | ndim × u64 | f64 data, row-major)
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use dail_core::datagen::SyntheticCorpus;
use dail_core::numerics::PRNG_ALGORITHM;
use dail_core::trainer::{TrainConfig, TrainState};
use dail_core::Matrix;

use crate::CliError;

pub const MAGIC: &[u8; 8] = b"DAILCKPT";
pub const VERSION: u8 = 1;
const MOMENTUM_PREFIX: &str = "momentum.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: usize,
    pub seed: u64,
    pub loss_mode: String,
    pub prng_algorithm: String,
    pub config: TrainConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub arrays: Vec<(String, Matrix)>,
}

impl Checkpoint {
    /// Snapshot of parameters and momentum buffers.
    pub fn from_state(state: &TrainState, config: &TrainConfig) -> Self {
        let mut arrays: Vec<(String, Matrix)> = state
            .params
            .weights
            .named()
            .into_iter()
            .map(|(n, m)| (n, m.clone()))
            .collect();
        arrays.extend(
            state
                .momentum
                .named()
                .into_iter()
                .map(|(n, m)| (format!("{MOMENTUM_PREFIX}{n}"), m.clone())),
        );
        Self {
            meta: CheckpointMeta {
                step: state.step,
                seed: config.seed,
                loss_mode: config.loss_mode.to_string(),
                prng_algorithm: PRNG_ALGORITHM.to_string(),
                config: config.clone(),
            },
            arrays,
        }
    }

    /// Rebuilds the training state against `corpus`. Every array must be
    /// present with the shape the corpus implies.
    pub fn restore(&self, corpus: &SyntheticCorpus) -> Result<TrainState, CliError> {
        if self.meta.prng_algorithm != PRNG_ALGORITHM {
            return Err(CliError::Checkpoint(format!(
                "checkpoint uses PRNG {}, this build uses {PRNG_ALGORITHM}",
                self.meta.prng_algorithm
            )));
        }
        let mut state =
            TrainState::init(&self.meta.config, corpus.input_dim(), &corpus.class_table)?;
        let expected = state.params.weights.named().len() * 2;
        if self.arrays.len() != expected {
            return Err(CliError::Checkpoint(format!(
                "checkpoint holds {} arrays, model expects {expected}",
                self.arrays.len()
            )));
        }
        let lookup = |name: &str| {
            self.arrays
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, m)| m)
                .ok_or_else(|| CliError::Checkpoint(format!("missing array {name}")))
        };
        let targets = state.params.weights.named_mut().into_iter().chain(
            state
                .momentum
                .named_mut()
                .into_iter()
                .map(|(n, m)| (format!("{MOMENTUM_PREFIX}{n}"), m)),
        );
        for (name, slot) in targets {
            let src = lookup(&name)?;
            if src.shape() != slot.shape() {
                return Err(CliError::Checkpoint(format!(
                    "array {name} has shape {:?}, corpus implies {:?}",
                    src.shape(),
                    slot.shape()
                )));
            }
            *slot = src.clone();
        }
        state.step = self.meta.step;
        Ok(state)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CliError> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&len_u32(meta.len())?.to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&len_u32(self.arrays.len())?.to_le_bytes());
        for (name, m) in &self.arrays {
            out.extend_from_slice(&len_u32(name.len())?.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&2u32.to_le_bytes());
            out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
            for v in m.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CliError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(CliError::Checkpoint("not a checkpoint".into()));
        }
        let version = r.take(1)?[0];
        if version != VERSION {
            return Err(CliError::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {VERSION})"
            )));
        }
        let meta_len = r.u32()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)?;
        let count = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| CliError::Checkpoint("array name is not UTF-8".into()))?;
            let ndim = r.u32()? as usize;
            let dims = (0..ndim).map(|_| r.u64()).collect::<Result<Vec<_>, _>>()?;
            let (rows, cols) = match dims[..] {
                [n] => (1, n as usize),
                [rows, cols] => (rows as usize, cols as usize),
                _ => {
                    return Err(CliError::Checkpoint(format!(
                        "array {name} has {ndim} dimensions"
                    )))
                }
            };
            let len = rows
                .checked_mul(cols)
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| CliError::Checkpoint(format!("array {name} is too large")))?;
            let data = r
                .take(len)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            arrays.push((name, Matrix::from_vec(rows, cols, data)?));
        }
        if r.pos != bytes.len() {
            return Err(CliError::Checkpoint(format!(
                "{} trailing bytes after the last array",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { meta, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn len_u32(n: usize) -> Result<u32, CliError> {
    u32::try_from(n)
        .map_err(|_| CliError::Checkpoint(format!("length {n} does not fit in 32 bits")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CliError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| CliError::Checkpoint("unexpected end".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CliError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64, CliError> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}
