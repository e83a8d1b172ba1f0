use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("candidate list is empty")]
    EmptyCandidates,

    /// More candidates than the model's document-slot table can address.
    #[error("candidate set has {count} passages but the model supports at most k_max = {k_max}")]
    CandidateOverflow { count: usize, k_max: usize },

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("document `{0}` has no slot in the slot map")]
    UnknownDocument(String),

    #[error("slot {slot} is outside the document table (k_max = {k_max})")]
    SlotOutOfRange { slot: usize, k_max: usize },

    #[error("duplicate passage (doc_key = `{doc_key}`, chunk_index = {chunk_index}) in one candidate set")]
    DuplicatePassage { doc_key: String, chunk_index: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid training instance: {0}")]
    InvalidInstance(String),

    #[error("contrastive loss needs at least one negative")]
    NoNegatives,

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Divergence {
        epoch: usize,
        step: usize,
        loss: f64,
    },

    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    /// An error tied to one line of an input file.
    #[error("{}:{line}: {source}", path.display())]
    InRecord {
        path: PathBuf,
        line: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic tag)")]
    BadMagic,

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },

    #[error("file is truncated")]
    Truncated,

    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}
