use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// A vector too short to normalize; usually a collapsed or uninitialized embedding.
    #[error("degenerate vector ({what}): norm {norm:e} is below 1e-12")]
    Degenerate { what: String, norm: f64 },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("{what} mismatch: expected {expected}, found {found}")]
    Mismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("kappa is undefined when expected agreement equals 1")]
    UndefinedKappa,

    #[error("confusion matrix is empty")]
    EmptyMatrix,

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Stable single-word category, used for machine-parseable CLI errors.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape { .. } | Error::Mismatch { .. } => "dimension",
            Error::Degenerate { .. } => "degenerate",
            Error::NonScalarLoss(_) => "contract",
            Error::LabelOutOfRange { .. } => "label",
            Error::InvalidArgument(_) => "config",
            Error::Parse { .. } => "parse",
            Error::UndefinedKappa | Error::EmptyMatrix => "metric",
            Error::Io { .. } => "io",
        }
    }
}
