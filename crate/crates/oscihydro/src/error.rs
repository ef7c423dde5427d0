use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong in this crate.
///
/// Numerical failures (step rejection, density collapse, node crossings) are
/// deliberately separate from configuration mistakes so the CLI can map them
/// to different exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    Grid(String),

    #[error("operands live on different grids ({context})")]
    GridMismatch { context: String },

    #[error("value buffer has {got} entries but the grid has {expected} points")]
    Length { expected: usize, got: usize },

    #[error("non-finite value at flat index {index} ({context})")]
    NonFinite { index: usize, context: String },

    #[error("density is negative at flat index {index}: {value}")]
    NegativeDensity { index: usize, value: f64 },

    #[error("phase is undefined through a density node at flat index {index} (rho = {density:.3e} below floor {floor:.3e})")]
    NodeEncountered {
        index: usize,
        density: f64,
        floor: f64,
    },

    #[error("unsupported scheme: {0}")]
    Scheme(String),

    #[error("{what}: step {dt:.3e} exceeds bound {bound:.3e}")]
    StepSize { what: String, dt: f64, bound: f64 },

    #[error("density fell below the floor at step {step} even after halving dt (min rho = {min:.3e})")]
    DensityCollapse { step: usize, min: f64 },

    #[error("trajectory {index} left the domain at step {step}")]
    Escape { index: usize, step: usize },

    #[error("{}field `{field}`: {message}", line.map(|l| format!("line {l}: ")).unwrap_or_default())]
    Config {
        line: Option<usize>,
        field: String,
        message: String,
    },

    #[error("snapshot file is malformed: {0}")]
    Snapshot(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            line: None,
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn config_at(line: usize, field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            line: Some(line),
            field: field.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by a bad configuration rather than by numerics.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config { .. } | Error::Grid(..) | Error::Scheme(..)
        )
    }
}
