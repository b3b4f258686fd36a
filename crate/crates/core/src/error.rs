//! Error type shared by every module of the crate.

use std::path::PathBuf;

/// Broad failure class. The CLI prints it as the `<category>` part of
/// `error: <category>: <detail>` and derives its exit code from it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Format,
    Shape,
    Lookup,
    Sampling,
    Io,
}

impl ErrorCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCategory::Config => "config",
            ErrorCategory::Format => "format",
            ErrorCategory::Shape => "shape",
            ErrorCategory::Lookup => "lookup",
            ErrorCategory::Sampling => "sampling",
            ErrorCategory::Io => "io",
        }
    }
}

/// On-disk format violations, each naming the offending file.
#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic in {}", .path.display())]
    BadMagic { path: PathBuf },
    #[error("version mismatch in {}: expected {expected}, found {found}", .path.display())]
    Version {
        path: PathBuf,
        expected: u32,
        found: u32,
    },
    #[error("truncated file {}: {detail}", .path.display())]
    Truncated { path: PathBuf, detail: String },
    #[error("count mismatch in {}: manifest declares {expected}, file holds {found}", .path.display())]
    CountMismatch {
        path: PathBuf,
        expected: u64,
        found: u64,
    },
    #[error("invalid manifest {}: {detail}", .path.display())]
    Manifest { path: PathBuf, detail: String },
    #[error("invalid feature data in {}: {detail}", .path.display())]
    Data { path: PathBuf, detail: String },
}

#[derive(Debug, thiserror::Error)]
pub enum UrtError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("{0}")]
    Shape(String),
    #[error("{0}")]
    Lookup(String),
    #[error("{0}")]
    Sampling(String),
    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl UrtError {
    pub fn category(&self) -> ErrorCategory {
        match self {
            UrtError::Config(_) => ErrorCategory::Config,
            UrtError::Format(_) => ErrorCategory::Format,
            UrtError::Shape(_) => ErrorCategory::Shape,
            UrtError::Lookup(_) => ErrorCategory::Lookup,
            UrtError::Sampling(_) => ErrorCategory::Sampling,
            UrtError::Io { .. } => ErrorCategory::Io,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        UrtError::Io {
            path: path.into(),
            source,
        }
    }

    /// Prefixes the message with extra context, keeping the category.
    pub fn context(self, ctx: impl std::fmt::Display) -> Self {
        match self {
            UrtError::Config(m) => UrtError::Config(format!("{ctx}: {m}")),
            UrtError::Shape(m) => UrtError::Shape(format!("{ctx}: {m}")),
            UrtError::Lookup(m) => UrtError::Lookup(format!("{ctx}: {m}")),
            UrtError::Sampling(m) => UrtError::Sampling(format!("{ctx}: {m}")),
            other => other,
        }
    }
}

pub type Result<T, E = UrtError> = std::result::Result<T, E>;
