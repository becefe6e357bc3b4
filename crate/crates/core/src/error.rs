use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failure categories surfaced by the library.
///
/// The variants line up with the CLI exit-code classes: configuration
/// problems, malformed data, and numerical or fitting failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("state error: {0}")]
    State(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("fit error: {0}")]
    Fit(String),

    #[error("initialization error: {0}")]
    Init(String),

    #[error("optimization error: {0}")]
    Optimization(String),

    #[error("refused: {0}")]
    Refused(String),

    #[error("fold {fold}: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Coarse classification used by front ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::Refused(_) => ErrorKind::Config,
            Error::Data(_) | Error::Io(_) => ErrorKind::Data,
            Error::Fold { source, .. } => source.kind(),
            Error::State(_)
            | Error::Shape(_)
            | Error::DegenerateFit(_)
            | Error::Fit(_)
            | Error::Init(_)
            | Error::Optimization(_) => ErrorKind::Numeric,
        }
    }
}
