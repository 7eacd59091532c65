use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file or buffer does not follow its documented layout. `field` names the
    /// offending part ("magic", "payload", "runs", ...).
    #[error("format error in {field}: {detail}")]
    Format { field: &'static str, detail: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty region: {0}")]
    EmptyRegion(String),

    #[error("missing class: no support samples for {0:?}")]
    MissingClass(Vec<String>),

    #[error("unknown label {label} (vocabulary has {n_classes} classes)")]
    UnknownLabel { label: u32, n_classes: usize },

    #[error("invalid configuration `{field}`: {detail}")]
    Config { field: String, detail: String },

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error("pair {id}: {source}")]
    Pair {
        id: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(field: &'static str, detail: impl Into<String>) -> Self {
        Error::Format { field, detail: detail.into() }
    }

    pub(crate) fn config(field: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Config { field: field.into(), detail: detail.into() }
    }

    /// Tags an error with the file it came from, unless it already names one.
    pub fn in_file(self, path: impl Into<PathBuf>) -> Self {
        match self {
            e @ (Error::Io { .. } | Error::File { .. } | Error::Pair { .. }) => e,
            e => Error::File { path: path.into(), source: Box::new(e) },
        }
    }

    /// The innermost error, past any file or pair tags.
    pub fn root(&self) -> &Error {
        match self {
            Error::File { source, .. } | Error::Pair { source, .. } => source.root(),
            e => e,
        }
    }

    /// Tags an error with the pair it came from, unless already tagged.
    pub fn in_pair(self, id: &str) -> Self {
        match self {
            e @ Error::Pair { .. } => e,
            e => Error::Pair { id: id.to_string(), source: Box::new(e) },
        }
    }

    /// True for errors caused by the run configuration rather than the data.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Config { .. } | Error::MissingClass(_) => true,
            Error::File { source, .. } | Error::Pair { source, .. } => source.is_config(),
            _ => false,
        }
    }
}
