use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("degenerate channel: all-zero channel matrix")]
    DegenerateChannel,

    #[error("not a dataset file")]
    NotDataset,
    #[error("unsupported version {0}")]
    UnsupportedVersion(u16),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("truncated file: expected {expected} bytes of sample data, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("malformed metadata: {0}")]
    Metadata(String),

    #[error("degenerate pilot symbol {0}: zero power")]
    DegeneratePilot(usize),
    #[error("degenerate latent: zero vector")]
    DegenerateLatent,
    #[error("feedback exceeds subcarriers: Z = {z} > Nc = {nc}")]
    FeedbackExceedsSubcarriers { z: usize, nc: usize },
    #[error("unsupported modulation order: {0} bits per symbol")]
    UnsupportedModulation(u32),

    #[error("no active users")]
    NoActiveUsers,
    #[error("degenerate precoder on subcarrier {0}")]
    DegeneratePrecoder(usize),
    #[error("noise power must be positive, got {0}")]
    NonPositiveNoise(f64),
    #[error("no usable eigenmodes")]
    NoUsableEigenmodes,
    #[error("zero reference tensor")]
    ZeroReference,

    #[error("configuration error: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {diagnostics}")]
    NonFiniteLoss { epoch: usize, batch: usize, diagnostics: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("{0} already exists (pass --force to overwrite)")]
    AlreadyExists(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
