use std::io;
use std::path::Path;

use serde::Serialize;

/// Broad failure classes; each maps to a process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorKind {
    Config,
    Data,
    Divergence,
    Io,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Divergence => 4,
            ErrorKind::Io => 1,
        }
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{message}")]
pub struct AppError {
    pub kind: ErrorKind,
    pub message: String,
}

pub type Result<T, E = AppError> = std::result::Result<T, E>;

impl AppError {
    pub fn config(message: impl Into<String>) -> Self {
        AppError {
            kind: ErrorKind::Config,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        AppError {
            kind: ErrorKind::Data,
            message: message.into(),
        }
    }

    pub fn io(path: &Path, err: io::Error) -> Self {
        // A missing input is a data problem; other IO failures are not.
        let kind = if err.kind() == io::ErrorKind::NotFound {
            ErrorKind::Data
        } else {
            ErrorKind::Io
        };
        AppError {
            kind,
            message: format!("{}: {err}", path.display()),
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.kind.exit_code()
    }

    /// Machine-readable one-line record for stderr.
    pub fn record(&self) -> String {
        serde_json::json!({
            "error": self.kind,
            "exit_code": self.exit_code(),
            "message": self.message,
        })
        .to_string()
    }
}

impl From<moodshift_core::Error> for AppError {
    fn from(e: moodshift_core::Error) -> Self {
        use moodshift_core::Error as E;
        let kind = match &e {
            E::Divergence { .. } => ErrorKind::Divergence,
            E::ValenceOutOfRange { .. } | E::Data(_) | E::Shape { .. } => ErrorKind::Data,
            E::Validation(_) | E::Construction(_) | E::Planning(_) | E::UnknownLayer(_) => ErrorKind::Config,
        };
        AppError {
            kind,
            message: e.to_string(),
        }
    }
}

impl From<serde_json::Error> for AppError {
    fn from(e: serde_json::Error) -> Self {
        AppError::data(format!("malformed JSON: {e}"))
    }
}

/// Attaches a path to an IO result.
pub trait IoContext<T> {
    fn at(self, path: &Path) -> Result<T>;
}

impl<T> IoContext<T> for io::Result<T> {
    fn at(self, path: &Path) -> Result<T> {
        self.map_err(|e| AppError::io(path, e))
    }
}
