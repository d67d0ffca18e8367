use std::path::PathBuf;

/// Errors raised anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("training diverged at epoch {epoch}, sequence {sequence}: {detail}")]
    Diverged {
        epoch: usize,
        sequence: usize,
        detail: String,
    },

    #[error("variable does not belong to this tape")]
    ForeignVar,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("CFL condition violated: c*dt/min(dx,dy) = {number:.4} exceeds the stability bound 1/sqrt(2) = {bound:.4}")]
    Cfl { number: f64, bound: f64 },

    #[error("I/O error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {}: {detail}", path.display())]
    Format { path: PathBuf, detail: String },
}

/// Coarse error classes, used by the command line to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Numeric,
    Io,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Shape { .. } | Error::Config(_) | Error::Cfl { .. } | Error::ForeignVar => {
                ErrorClass::Config
            }
            Error::NonFinite { .. } | Error::Diverged { .. } => ErrorClass::Numeric,
            Error::Io { .. } | Error::Format { .. } => ErrorClass::Io,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
