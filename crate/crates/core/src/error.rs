use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse grouping used to map failures onto process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid fingerprint: {0}")]
    InvalidFingerprint(String),

    #[error("duplicate compound: row {second} repeats the fingerprint of row {first}")]
    DuplicateCompound { first: usize, second: usize },

    #[error("numerical degeneracy: {0}")]
    NumericalDegeneracy(String),

    #[error("argument outside domain: {0}")]
    Domain(String),

    #[error("kernel matrix is not positive definite (family {family}, phi {phi})")]
    KernelIndefinite { family: String, phi: f64 },

    #[error("ordering violated: {0}")]
    Ordering(String),

    #[error("posterior mode search failed after {iterations} iterations (score residual {residual:e})")]
    ModeFailure { iterations: usize, residual: f64 },

    #[error("Laplace Hessian is not positive definite")]
    IndefiniteHessian,

    #[error("operation requires the probit link, model uses {0}")]
    WrongLink(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("cannot stratify: class {class} has {count} observations, fewer than {folds} folds")]
    Stratification { class: usize, count: usize, folds: usize },

    #[error("data error: {0}")]
    Data(String),

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: String,
        line: u64,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) | Error::WrongLink(_) => ErrorCategory::Config,
            Error::InvalidFingerprint(_)
            | Error::DuplicateCompound { .. }
            | Error::Stratification { .. }
            | Error::Data(_)
            | Error::Parse { .. }
            | Error::Io(_)
            | Error::Json(_) => ErrorCategory::Data,
            Error::NumericalDegeneracy(_)
            | Error::Domain(_)
            | Error::KernelIndefinite { .. }
            | Error::Ordering(_)
            | Error::ModeFailure { .. }
            | Error::IndefiniteHessian => ErrorCategory::Numerical,
        }
    }
}
