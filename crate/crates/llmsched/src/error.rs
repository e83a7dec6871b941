use thiserror::Error;

/// Errors surfaced by the library.
///
/// The variants are grouped by how a caller should react: `Config` means an
/// input file or parameter is malformed or incomplete, `Infeasible` means the
/// inputs are well-formed but no schedule can satisfy them, and `Mismatch`
/// means two otherwise-valid artifacts (e.g. a plan and an application graph)
/// disagree with each other.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or incomplete configuration input. The message names the
    /// offending file, field or key.
    #[error("configuration error: {0}")]
    Config(String),

    /// The request cannot be satisfied on the given node (no valid plan, not
    /// enough GPUs, ...).
    #[error("infeasible configuration: {0}")]
    Infeasible(String),

    /// Two inputs that must agree do not (plan vs. graph, oracle vs. request
    /// set, ...).
    #[error("mismatched inputs: {0}")]
    Mismatch(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code a CLI should use for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Io(_) | Error::Json(_) | Error::Csv(_) => 2,
            Error::Infeasible(_) => 3,
            Error::Mismatch(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
