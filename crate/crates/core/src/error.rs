use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("numeric error in {op}: {detail}")]
    Numeric { op: &'static str, detail: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("length error: {0}")]
    Length(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("io error on {}: {source}", path.display())]
    File {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable category, used by the CLI's one-line failure report.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension { .. } | Error::Shape(_) => "dimension",
            Error::Index(_) => "index",
            Error::Numeric { .. } => "numeric",
            Error::Config(_) => "config",
            Error::Data(_) => "data",
            Error::Length(_) => "length",
            Error::Format(_) => "format",
            Error::Io(_) | Error::File { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}

pub(crate) fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

pub(crate) fn data_err(msg: impl Into<String>) -> Error {
    Error::Data(msg.into())
}

/// Wraps an io failure with the path it concerns.
pub(crate) fn file_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::File {
        path: path.to_path_buf(),
        source,
    }
}
