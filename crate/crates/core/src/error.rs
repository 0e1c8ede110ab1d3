use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    #[error(
        "dimension mismatch in {op}: left is {lhs_rows}x{lhs_cols}, right is {rhs_rows}x{rhs_cols}"
    )]
    Dimension {
        op: &'static str,
        lhs_rows: usize,
        lhs_cols: usize,
        rhs_rows: usize,
        rhs_cols: usize,
    },

    /// A shape constraint on a single operand was violated.
    #[error("bad shape for {op}: {message}")]
    Shape { op: &'static str, message: String },

    /// Invalid configuration (ranks, schemes, layer names, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Invalid input data (labels out of range, malformed files, ...).
    #[error("data error: {0}")]
    Data(String),

    /// A numerical failure at a known step of an iterative procedure.
    #[error("numerical error at step {step}: {message}")]
    Numerical { step: usize, message: String },

    /// An internal consistency assertion failed; this signals a bug.
    #[error("internal consistency violation: {0}")]
    Internal(String),

    /// Checkpoint container is malformed or from an unsupported version.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dims(op: &'static str, lhs: (usize, usize), rhs: (usize, usize)) -> Self {
        Error::Dimension {
            op,
            lhs_rows: lhs.0,
            lhs_cols: lhs.1,
            rhs_rows: rhs.0,
            rhs_cols: rhs.1,
        }
    }
}
