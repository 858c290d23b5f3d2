use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the game, data, model and simulation layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid game parameters: {0}")]
    InvalidParams(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// The state left the disc but the outward condition `f(ξ)ᵀξ > 0` fails at
    /// the located root. The step has to be shrunk.
    #[error("degenerate (tangential) boundary crossing at ({x}, {y})")]
    DegenerateCrossing { x: f64, y: f64 },

    #[error("terminal angle {beta} is outside the usable part of the terminal circle")]
    NotUsable { beta: f64 },

    #[error("terminal angle {beta} lies on the universal line; use the axis generator")]
    SingularStall { beta: f64 },

    #[error("game parameters yield an empty usable part")]
    EmptyUsablePart,

    #[error("costate is zero; pursuer heading undefined")]
    ZeroGradient,

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Checkpoint and data-file decoding failures.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u64, expected: u64 },

    #[error("truncated or malformed file: {0}")]
    Truncated(String),

    #[error("architecture mismatch: {0}")]
    Shape(String),

    #[error("csv: {0}")]
    Csv(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
