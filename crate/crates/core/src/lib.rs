//! Multi-dataset embedding training with dataset-aware losses.
//!
//! When several labeled corpora are merged, the same identity can appear in
//! more than one of them under unrelated class labels. Plain softmax training
//! then pushes those duplicates apart. This crate implements the fix and the
//! machinery around it:
//!
//! - [`numerics`]: dense matrices, masked log-softmax, normalization, seeded
//!   randomness and a central-difference gradient oracle.
//! - [`registry`]: the global class table and per-sample class masks
//!   (dataset indicator and its crossing-dropout relaxation).
//! - [`losses`]: masked softmax losses, angular-margin logits, the dataset
//!   classifier loss, all with analytic gradients.
//! - [`model`]: ReLU embedder, class head, dataset head and the gradient
//!   reversal junction, with a hand-written backward pass.
//! - [`datagen`]: synthetic corpora with planted identity overlap and
//!   per-dataset domain shift.
//! - [`trainer`]: the two-stage SGD-with-momentum loop.
//! - [`eval`]: verification accuracy, dataset-membership probe and overlap
//!   consistency.

pub mod datagen;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod registry;
pub mod trainer;

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    #[error("empty active set")]
    EmptyActiveSet,
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("inconsistent class map: class {class} assigned to datasets {first} and {second}")]
    InconsistentClassMap {
        class: usize,
        first: usize,
        second: usize,
    },
    #[error("{what} {value} out of range (must be < {bound})")]
    OutOfRange {
        what: &'static str,
        value: usize,
        bound: usize,
    },
    #[error("probability {0} outside [0, 1]")]
    InvalidProbability(f64),
    #[error("target masked out: sample {sample} target {target}")]
    TargetMaskedOut { sample: usize, target: usize },
    #[error("invalid stage {0} (expected 1 or 2)")]
    InvalidStage(u8),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("single dataset: dataset probe needs at least two datasets")]
    SingleDataset,
    #[error("no shared identities present in two or more datasets")]
    NoSharedIdentities,
    #[error("cannot build pairs: {0}")]
    InsufficientPairs(String),
    #[error("corpus format: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub use numerics::{Matrix, Prng};
