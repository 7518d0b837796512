use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid probability {0}: must lie in [0, 1)")]
    InvalidProbability(f64),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("step called after the episode finished")]
    StepAfterDone,
    #[error("invalid action {0}")]
    InvalidAction(usize),
    #[error("format version mismatch: expected {expected}, found {found}")]
    FormatVersionMismatch { expected: u32, found: u32 },
    #[error("corrupt manifest: {0}")]
    CorruptManifest(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),
    #[error("batch item {0} has no code grid")]
    MissingCodes(usize),
    #[error("regularizer kind oreo requires a trained VQ-VAE")]
    MissingVqvae,
    #[error("no feature has two occupied categories")]
    DegenerateInput,
    #[error("normalized-score anchors are missing for this environment")]
    MissingAnchors,
    #[error("config parse error: {0}")]
    ConfigParse(String),
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("checkpoint version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
