use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid temperature {0}: must be finite and > 0")]
    InvalidTemperature(f64),

    #[error("invalid layer spec: {0}")]
    InvalidSpec(String),

    #[error("LabelOutOfRange: label {label} not in 1..={num_classes}")]
    LabelOutOfRange { label: u32, num_classes: usize },

    #[error("InvalidTargets: row {row} sums to {sum} or has entries outside [0, 1]")]
    InvalidTargets { row: usize, sum: f64 },

    #[error("invalid loss weights: {0}")]
    InvalidWeights(String),

    #[error("MissingClassSamples({0})")]
    MissingClassSamples(u32),

    #[error("CorruptCheckpoint at byte {offset}: {reason}")]
    CorruptCheckpoint { offset: usize, reason: String },

    #[error("CorruptTable at byte {offset}: {reason}")]
    CorruptTable { offset: usize, reason: String },

    #[error("CorruptDataset at byte {offset}: {reason}")]
    CorruptDataset { offset: usize, reason: String },

    #[error("temperature mismatch: table computed at T={table}, run requested T={requested}")]
    TemperatureMismatch { table: f64, requested: f64 },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("NonFiniteLoss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("grid cell {cell}: {source}")]
    Cell {
        cell: String,
        #[source]
        source: Box<Error>,
    },

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
