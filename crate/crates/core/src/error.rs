use std::fmt;

use thiserror::Error;

/// Errors produced by the library. Each variant maps onto one machine-readable
/// category (see [`MpaError::category`]) which the CLI uses for exit codes.
#[derive(Debug, Error)]
pub enum MpaError {
    #[error("dimension mismatch in {op}: {left} vs {right}")]
    Dimension {
        op: &'static str,
        left: ShapeDisplay,
        right: ShapeDisplay,
    },

    #[error("{what} index {index} out of range (bound {bound})")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{phase} failed: {source}")]
    Phase {
        phase: &'static str,
        #[source]
        source: Box<MpaError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = MpaError> = std::result::Result<T, E>;

impl MpaError {
    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        MpaError::Dimension {
            op,
            left: ShapeDisplay(left.to_vec()),
            right: ShapeDisplay(right.to_vec()),
        }
    }

    pub fn in_phase(self, phase: &'static str) -> Self {
        MpaError::Phase {
            phase,
            source: Box::new(self),
        }
    }

    /// Stable category name, used for CLI exit codes and error reports.
    pub fn category(&self) -> &'static str {
        match self {
            MpaError::Dimension { .. } => "dimension",
            MpaError::Index { .. } => "index",
            MpaError::Degenerate(_) => "degenerate",
            MpaError::Format { .. } => "format",
            MpaError::Validation(_) => "validation",
            MpaError::Contract(_) => "contract",
            MpaError::Config(_) => "config",
            MpaError::Phase { source, .. } => source.category(),
            MpaError::Io(_) => "io",
        }
    }
}

/// Shape wrapper so dimension errors print as `[3, 4]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeDisplay(pub Vec<usize>);

impl fmt::Display for ShapeDisplay {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}
