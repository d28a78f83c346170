use thiserror::Error;

/// Crate-wide error type. Numerical failures carry enough context to locate
/// the producing operation (op name, pivot index, jitter level).
#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: String, detail: String },

    /// Raised the moment any forward op produces a NaN or infinity; gradients
    /// never silently propagate non-finite values.
    #[error("non-finite value produced by `{op}`")]
    NotFinite { op: String },

    #[error("matrix not positive definite (pivot {pivot}, jitter {jitter:e})")]
    NotPosDef { pivot: usize, jitter: f64 },

    #[error("singular triangular system (zero diagonal at {index})")]
    SingularTriangular { index: usize },

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(op: &str, detail: impl Into<String>) -> Self {
        Error::Shape { op: op.to_string(), detail: detail.into() }
    }
}
